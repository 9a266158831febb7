import numpy as np
import pytest

from gp.dyn_gp import Dataset, DynamicsPrior, fit_posterior
from gp.kernels import ScalarKernel
from sim.config import PendulumParams
from sim.pendulum import pendulum_barriers, vector_field


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pendulum():
    return PendulumParams()


@pytest.fixture
def barriers(pendulum):
    """(degree-2, degree-1) pendulum barriers."""
    return pendulum_barriers(pendulum)


@pytest.fixture
def unit_prior():
    return DynamicsPrior(np.eye(2), np.eye(2), ScalarKernel(np.ones(2), 1.0))


@pytest.fixture
def pendulum_data(pendulum):
    rng = np.random.default_rng(7)
    states = np.column_stack([rng.uniform(0.5, 2.0, 8), rng.uniform(-1.0, 1.0, 8)])
    controls = rng.uniform(-3.0, 3.0, (8, 1))
    derivs = np.array([vector_field(x, u, pendulum) for x, u in zip(states, controls)])
    return Dataset(states, controls, derivs, np.arange(8, dtype=float))


@pytest.fixture
def trained_posterior(unit_prior, pendulum_data):
    return fit_posterior(unit_prior, pendulum_data, 1e-6)
