import numpy as np
import pytest

from gp.dyn_gp import Dataset, fit_posterior
from safety.barrier import BarrierFunction
from safety.trigger import (
    TriggerParams,
    chi_bound,
    estimate_lipschitz,
    max_trigger_time,
    reachability_radius,
    trigger_confidence,
)


def test_radius_closed_form():
    assert reachability_radius(1.0, 1.0, np.log(2.0)) == pytest.approx(1.0, rel=1e-12)


def test_radius_vanishes_at_trigger_and_when_stationary():
    assert reachability_radius(2.0, 3.0, 0.0) == 0.0
    assert reachability_radius(2.0, 0.0, 5.0) == 0.0


def test_radius_small_lipschitz_limit():
    assert reachability_radius(1e-10, 2.0, 0.3) == pytest.approx(0.6, abs=1e-8)


@pytest.mark.parametrize("args", [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0, -0.1)])
def test_radius_rejects_invalid_inputs(args):
    with pytest.raises(ValueError):
        reachability_radius(*args)


def test_trigger_time_closed_form():
    params = TriggerParams(L=1.0, b=1.0, L_alpha_h=0.0, tau_cap=1.0)
    assert max_trigger_time(params, zeta=1.0, chi=1.0, xdot_norm=1.0) == pytest.approx(np.log(2.0), rel=1e-12)


def test_zero_tightening_gives_zero_time():
    assert max_trigger_time(TriggerParams(L=2.0), zeta=0.0, chi=1.0, xdot_norm=0.5) == 0.0


def test_stationary_state_returns_cap():
    params = TriggerParams(L=2.0, tau_cap=0.25)
    assert max_trigger_time(params, zeta=0.01, chi=1.0, xdot_norm=0.0) == 0.25


def test_trigger_time_is_capped():
    params = TriggerParams(L=1.0, tau_cap=0.05)
    assert max_trigger_time(params, zeta=10.0, chi=1.0, xdot_norm=0.01) == 0.05


@pytest.mark.parametrize("L, L_alpha_h, chi, zeta, xdot_norm", [(1.0, 0.0, 1.0, 1.0, 1.0), (3.0, 0.7, 2.5, 0.01, 4.0), (0.2, 1.5, 0.3, 0.5, 0.1)])
def test_hold_time_exhausts_the_tightening(L, L_alpha_h, chi, zeta, xdot_norm):
    params = TriggerParams(L=L, L_alpha_h=L_alpha_h, tau_cap=100.0)
    tau = max_trigger_time(params, zeta, chi, xdot_norm)
    growth = (chi * L + L_alpha_h) * reachability_radius(L, xdot_norm, tau)
    assert growth == pytest.approx(zeta, rel=1e-10)


def test_trigger_time_is_monotone():
    params = TriggerParams(L=1.5, L_alpha_h=0.2, tau_cap=10.0)
    speeds = [max_trigger_time(params, 0.1, 1.0, v) for v in (0.5, 1.0, 2.0, 4.0)]
    margins = [max_trigger_time(params, z, 1.0, 1.0) for z in (0.01, 0.1, 1.0)]
    assert all(a > b for a, b in zip(speeds, speeds[1:]))
    assert all(a < b for a, b in zip(margins, margins[1:]))


@pytest.mark.parametrize("kwargs", [{"zeta": -0.1, "chi": 1.0}, {"zeta": 0.1, "chi": 0.0}])
def test_trigger_time_rejects_invalid_inputs(kwargs):
    with pytest.raises(ValueError):
        max_trigger_time(TriggerParams(L=1.0), xdot_norm=1.0, **kwargs)


@pytest.mark.parametrize("kwargs", [{"L": 0.0}, {"L": 1.0, "b": 0.0}, {"L": 1.0, "L_alpha_h": -1.0}, {"L": 1.0, "tau_cap": 0.0}])
def test_invalid_trigger_params(kwargs):
    with pytest.raises(ValueError):
        TriggerParams(**kwargs)


def test_trigger_confidence():
    params = TriggerParams(L=2.0, b=0.5)
    assert params.q == pytest.approx(1.0 - np.exp(-1.0))
    assert trigger_confidence(0.9, params) == pytest.approx(0.9 * (1.0 - np.exp(-1.0)))


def test_chi_at_zero_radius(barriers):
    x = np.array([1.2, -0.4])
    expected = 1.05 * np.linalg.norm(barriers[1].gradient(x))
    assert chi_bound(barriers[1], x, 0.0) == pytest.approx(expected, rel=1e-12)


def test_chi_of_linear_barrier():
    a = np.array([3.0, -4.0])
    bf = BarrierFunction(lambda x: float(a @ x), lambda x: a)
    assert chi_bound(bf, np.zeros(2), 7.5) == pytest.approx(5.25)


def test_chi_includes_centre_and_is_deterministic(barriers):
    x = np.array([1.2, 0.4])
    values = [chi_bound(barriers[1], x, r) for r in (0.0, 0.1, 0.5)]
    assert values[0] <= min(values[1:])
    assert chi_bound(barriers[1], x, 0.5) == values[2]


@pytest.mark.slow
def test_chi_covers_dense_grid(barriers):
    x, radius = np.array([1.2, 0.4]), 0.3
    grid = np.stack(np.meshgrid(np.linspace(-1, 1, 100), np.linspace(-1, 1, 100)), axis=-1).reshape(-1, 2)
    grid = grid[np.sum(grid**2, axis=1) <= 1.0]
    dense = max(np.linalg.norm(barriers[1].gradient(x + radius * p)) for p in grid)
    assert abs(chi_bound(barriers[1], x, radius) / dense - 1.0) <= 0.05


@pytest.mark.parametrize("kwargs", [{"radius": -0.1}, {"radius": 0.1, "samples": 7}])
def test_chi_rejects_invalid_inputs(barriers, kwargs):
    with pytest.raises(ValueError):
        chi_bound(barriers[1], np.zeros(2), **kwargs)


def test_lipschitz_floor_for_untrained_posterior(unit_prior):
    post = fit_posterior(unit_prior, Dataset.empty(2, 1))
    assert estimate_lipschitz(post, [1.0], np.zeros(2), 0.1, floor=0.02) == 0.02


def test_lipschitz_estimate_is_deterministic(trained_posterior):
    first = estimate_lipschitz(trained_posterior, [0.5], np.array([1.0, 0.2]), 0.1)
    assert first > 1e-3
    assert estimate_lipschitz(trained_posterior, [0.5], np.array([1.0, 0.2]), 0.1) == first
