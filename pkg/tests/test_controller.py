import numpy as np
import pytest

from gp.dyn_gp import Dataset, DynamicsPrior, fit_posterior
from gp.kernels import ScalarKernel
from safety.barrier import BarrierFunction, cbc_moments
from safety.controller import (
    ChanceMethod,
    ChanceSpec,
    InterpolationError,
    SocConstraint,
    chance_to_deterministic,
    empirical_chance_check,
    solve_safe_control,
)
from sim.pendulum import vector_field


def affine_constraint(c, d, zeta, beta=0.0):
    c = np.atleast_1d(np.asarray(c, dtype=float))
    m = c.size
    return SocConstraint(c, d, np.zeros((m, m)), np.zeros(m), 0.0, beta, zeta)


@pytest.fixture
def local_posterior(pendulum):
    """Posterior trained densely around theta = 1.4, omega = 0.8."""
    rng = np.random.default_rng(11)
    states = np.column_stack([rng.uniform(1.0, 1.8, 30), rng.uniform(0.3, 1.3, 30)])
    controls = rng.uniform(-5.0, 5.0, (30, 1))
    derivs = np.array([vector_field(x, u, pendulum) for x, u in zip(states, controls)])
    prior = DynamicsPrior(np.eye(2), np.eye(2), ScalarKernel(np.ones(2), 1.0))
    return fit_posterior(prior, Dataset(states, controls, derivs, np.arange(30, dtype=float)))


@pytest.mark.parametrize(
    "confidence, method, expected",
    [
        (0.9, ChanceMethod.GAUSS_QUANTILE, 1.2815515655446004),
        (0.5, ChanceMethod.GAUSS_QUANTILE, 0.0),
        (0.95, ChanceMethod.CANTELLI, np.sqrt(19.0)),
        (0.9, ChanceMethod.CANTELLI, 3.0),
    ],
)
def test_chance_multiplier(confidence, method, expected):
    assert ChanceSpec(0.01, confidence, method).beta == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_method_accepts_plain_strings():
    assert ChanceSpec(method="cantelli").method is ChanceMethod.CANTELLI


@pytest.mark.parametrize("kwargs", [{"confidence": 1.0}, {"confidence": 0.4}, {"zeta": -0.1}])
def test_invalid_chance_spec(kwargs):
    with pytest.raises(ValueError):
        ChanceSpec(**kwargs)


def test_interpolation_recovers_polynomial_moments(rng):
    m = 3
    c, d = rng.normal(size=m), 0.4
    root = rng.normal(size=(m, m))
    P, q, r = root @ root.T, rng.normal(size=m), 5.0

    def moment_fn(u):
        return c @ u + d, u @ P @ u + q @ u + r

    con = chance_to_deterministic(moment_fn, ChanceSpec(0.2, 0.9), m)
    np.testing.assert_allclose(con.c, c, atol=1e-10)
    np.testing.assert_allclose(con.P, P, atol=1e-9)
    np.testing.assert_allclose(con.q, q, atol=1e-10)
    assert con.d == pytest.approx(d)
    assert con.r == pytest.approx(r)
    assert con.zeta == 0.2
    u = rng.normal(size=m)
    assert con.margin(u) == pytest.approx(c @ u + d - 0.2 - con.beta * np.sqrt(u @ P @ u + q @ u + r))


def test_interpolation_rejects_non_polynomial_moments():
    with pytest.raises(InterpolationError):
        chance_to_deterministic(lambda u: (float(np.sin(u[0])), 1.0), ChanceSpec(), 1)


def test_interpolation_needs_a_control():
    with pytest.raises(ValueError):
        chance_to_deterministic(lambda u: (0.0, 0.0), ChanceSpec(), 0)


def test_inactive_constraint_returns_reference():
    solution = solve_safe_control([[1.0]], [0.3], affine_constraint([1.0], 5.0, 0.01))
    np.testing.assert_array_equal(solution.u, [0.3])
    assert solution.feasible
    assert solution.objective == 0.0


def test_active_affine_constraint():
    solution = solve_safe_control([[1.0]], [0.0], affine_constraint([1.0], 0.0, 2.0))
    assert solution.feasible
    assert solution.u[0] == pytest.approx(2.0, abs=1e-8)


def test_cone_constraint_boundary_for_single_control():
    con = SocConstraint(np.array([1.0]), 0.0, np.array([[0.0]]), np.zeros(1), 1.0, 2.0, 0.0)
    solution = solve_safe_control([[1.0]], [0.0], con)
    # u - 2 * 1 >= 0
    assert solution.u[0] == pytest.approx(2.0, abs=1e-8)
    assert solution.margin >= -1e-8


def test_infeasible_constraint_maximizes_margin():
    con = SocConstraint(np.array([1.0]), -100.0, np.array([[0.0]]), np.zeros(1), 0.0, 0.0, 0.0)
    solution = solve_safe_control([[1.0]], [0.0], con, bounds=([-20.0], [20.0]))
    assert not solution.feasible
    assert solution.u[0] == pytest.approx(20.0, abs=1e-6)
    assert solution.margin == pytest.approx(-80.0, abs=1e-5)


def random_cone(rng, m):
    """Valid cone: variance |L^T u + l|^2 + s with s > 0, strictly feasible somewhere in the box."""
    L, l = rng.normal(size=(m, m)), rng.normal(size=m)
    P, q, r = L @ L.T, 2.0 * L @ l, float(l @ l) + rng.uniform(0.1, 2.0)
    c, beta, zeta = rng.normal(scale=3.0, size=m), rng.uniform(0.0, 3.0), 0.01
    u0 = rng.uniform(-10.0, 10.0, m)
    d = zeta + beta * np.sqrt(u0 @ P @ u0 + q @ u0 + r) - c @ u0 + rng.uniform(1.0, 10.0)
    return SocConstraint(c, float(d), P, q, r, beta, zeta)


def grid_optimum(Q, u_ref, con, points):
    axis = np.linspace(-20.0, 20.0, points)
    grid = np.array(np.meshgrid(*[axis] * con.dim, indexing="ij")).reshape(con.dim, -1).T
    variances = np.einsum("si,ij,sj->s", grid, con.P, grid) + grid @ con.q + con.r
    margins = grid @ con.c + con.d - con.zeta - con.beta * np.sqrt(np.clip(variances, 0.0, None))
    feasible = grid[margins >= 0]
    diffs = feasible - u_ref
    return float(np.min(np.einsum("si,ij,sj->s", diffs, Q, diffs)))


def test_coupled_objective_uses_interior_point():
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    solution = solve_safe_control(Q, [0.0, 0.0], affine_constraint([1.0, 1.0], 0.0, 1.0))
    assert solution.feasible
    assert solution.iterations > 0
    np.testing.assert_allclose(solution.u, [0.25, 0.75], atol=1e-5)


def random_weight(rng, m):
    root = rng.normal(size=(m, m))
    return root @ root.T + 0.5 * np.eye(m)


@pytest.mark.parametrize("seed", range(40))
def test_two_controls_reach_grid_optimum(seed):
    rng = np.random.default_rng(seed)
    con, Q = random_cone(rng, 2), random_weight(rng, 2)
    u_ref = rng.uniform(-20.0, 20.0, 2)
    solution = solve_safe_control(Q, u_ref, con)
    assert solution.feasible and solution.converged
    assert solution.margin >= -1e-6
    assert np.all(np.abs(solution.u) <= 20.0)
    best = grid_optimum(Q, u_ref, con, 401)
    assert solution.objective <= best + 1e-6 * (1.0 + best)


@pytest.mark.parametrize("seed", range(20))
def test_single_control_reaches_grid_optimum(seed):
    rng = np.random.default_rng(100 + seed)
    con = random_cone(rng, 1)
    u_ref = rng.uniform(-20.0, 20.0, 1)
    solution = solve_safe_control([[1.0]], u_ref, con)
    assert solution.feasible
    assert solution.margin >= -1e-8
    best = grid_optimum(np.eye(1), u_ref, con, 400_001)
    assert solution.objective <= best + 1e-6 * (1.0 + best)


def test_cone_with_uncertainty_uses_interior_point():
    # u1 + u2 - 1 >= |u|, closest point to the origin lies on the diagonal
    con = SocConstraint(np.ones(2), 0.0, np.eye(2), np.zeros(2), 0.0, 1.0, 1.0)
    Q = np.array([[1.0, 0.2], [0.2, 1.0]])
    solution = solve_safe_control(Q, [0.0, 0.0], con)
    assert solution.feasible and solution.converged
    assert solution.iterations > 0
    expected = 1.0 / (2.0 - np.sqrt(2.0))
    np.testing.assert_allclose(solution.u, [expected, expected], atol=1e-5)


def test_iteration_cap_is_reported_as_unconverged():
    con = SocConstraint(np.ones(2), 0.0, np.eye(2), np.zeros(2), 0.0, 1.0, 1.0)
    solution = solve_safe_control(np.array([[1.0, 0.2], [0.2, 1.0]]), [0.0, 0.0], con, max_iterations=1)
    assert not solution.converged
    assert not solution.feasible
    assert solution.margin > 0


def test_singular_barrier_hessian_does_not_abort():
    P = np.array([[2.397, -0.358], [-0.358, 0.238]])
    con = SocConstraint(np.array([1.0, -0.5]), 3.0, P, np.zeros(2), 1e-12, 1.999, 0.01)
    solution = solve_safe_control(np.eye(2) + 0.3, [-20.0, 20.0], con)
    assert solution.margin >= -1e-6
    assert np.all(np.isfinite(solution.u))


def test_feasible_set_is_convex(rng):
    for _ in range(100):
        con = random_cone(rng, 2)
        points = rng.uniform(-20.0, 20.0, (400, 2))
        feasible = [u for u in points if con.margin(u) >= 0]
        if len(feasible) < 2:
            continue
        first, second = feasible[0], feasible[-1]
        for weight in (0.25, 0.5, 0.75):
            assert con.margin(weight * first + (1.0 - weight) * second) >= -1e-8


@pytest.mark.parametrize("method", list(ChanceMethod))
def test_multiplier_grows_with_confidence(method):
    betas = [ChanceSpec(0.01, p, method).beta for p in (0.5, 0.6, 0.75, 0.9, 0.99, 0.999)]
    assert all(a < b for a, b in zip(betas, betas[1:]))


def test_separable_objective_projects_onto_box():
    solution = solve_safe_control(np.eye(2), [30.0, 0.0], affine_constraint([0.0, 1.0], 1.0, 0.0), bounds=([-20, -20], [20, 20]))
    np.testing.assert_allclose(solution.u, [20.0, 0.0])


def test_non_positive_definite_weight_rejected():
    with pytest.raises(ValueError):
        solve_safe_control([[0.0]], [0.0], affine_constraint([1.0], 0.0, 0.0))


def test_empty_box_rejected():
    with pytest.raises(ValueError):
        solve_safe_control([[1.0]], [0.0], affine_constraint([1.0], 0.0, 0.0), bounds=([1.0], [1.0]))


def test_chance_check_needs_enough_samples(trained_posterior, barriers):
    with pytest.raises(ValueError):
        empirical_chance_check(trained_posterior, barriers[1], np.array([1.0, 0.0]), [0.0], 0.01, samples=999)


def test_certain_constraint_holds_surely(pendulum_data):
    prior = DynamicsPrior(np.zeros((2, 2)), np.eye(2), ScalarKernel(np.ones(2), 1.0))
    post = fit_posterior(prior, pendulum_data)
    flat = BarrierFunction(lambda x: 0.5, lambda x: np.zeros(2), name="flat")
    assert empirical_chance_check(post, flat, np.array([1.0, 0.0]), [3.0], 0.01, samples=2000) == 1.0


def _worst_reference(con, bounds):
    return min(([bounds[0]], [bounds[1]]), key=con.margin)


@pytest.mark.slow
@pytest.mark.parametrize(
    "barrier_index, method, confidence, exact",
    [
        (1, ChanceMethod.GAUSS_QUANTILE, 0.9, True),
        (0, ChanceMethod.CANTELLI, 0.9, False),
    ],
)
def test_filtered_control_meets_chance_constraint(local_posterior, barriers, barrier_index, method, confidence, exact):
    bf = barriers[barrier_index]
    x = np.array([1.4, 0.8])
    spec = ChanceSpec(0.01, confidence, method)

    def moment_fn(u):
        moments = cbc_moments(local_posterior, bf, x, u)
        return moments.mean, moments.variance

    con = chance_to_deterministic(moment_fn, spec, 1)
    u_ref = _worst_reference(con, (-20.0, 20.0))
    assert con.margin(u_ref) < 0

    solution = solve_safe_control([[1.0]], u_ref, con)
    assert solution.feasible
    probability = empirical_chance_check(local_posterior, bf, x, solution.u, spec.zeta, samples=100_000, seed=2)
    assert probability >= confidence - 0.02
    if exact:
        # degree-1 CBC is Gaussian, so the active constraint is met with equality
        assert abs(probability - confidence) <= 0.02
