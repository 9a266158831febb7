import numpy as np
import pytest

from gp.dyn_gp import Dataset, DynamicsPrior, augment_control, fit_posterior, posterior_moments
from gp.kernels import DimensionError, ScalarKernel
from safety.barrier import (
    BarrierFunction,
    DerivativeCheckError,
    NegativeVarianceError,
    RelativeDegreeError,
    cbc1_moments,
    cbc2_moments,
    cbc_moments,
    check_derivatives,
    clamp_variance,
    lie_chain_moments,
    quadratic_inner_moments,
    validate_kalpha,
)
from safety.controller import sample_cbc
from sim.pendulum import pendulum_barriers


def linear_barrier(a, offset=0.5, degree=1):
    a = np.asarray(a, dtype=float)
    return BarrierFunction(
        lambda x: float(a @ x) + offset,
        lambda x: a.copy(),
        lambda x: np.zeros((a.size, a.size)),
        relative_degree=degree,
        alpha=2.0,
        k_alpha=None if degree == 1 else np.ones(degree),
        name="linear",
    )


def test_flat_barrier_has_zero_variance(trained_posterior):
    bf = linear_barrier([0.0, 0.0], offset=0.3)
    moments = cbc1_moments(trained_posterior, bf, np.array([1.0, 0.2]), [4.0])
    assert moments.variance == 0.0
    assert moments.mean == pytest.approx(2.0 * 0.3)


def test_untrained_cbc1_uses_prior_moments(unit_prior):
    post = fit_posterior(unit_prior, Dataset.empty(2, 1))
    a = np.array([0.5, -1.5])
    bf = linear_barrier(a)
    x, u = np.array([0.3, 0.4]), np.array([1.5])
    moments = cbc1_moments(post, bf, x, u)
    u_aug = augment_control(u)
    assert moments.mean == pytest.approx(2.0 * bf.value(x))
    assert moments.variance == pytest.approx(float(u_aug @ u_aug) * float(a @ a))


def test_cbc1_rejects_degree_two_barrier(trained_posterior, barriers):
    with pytest.raises(RelativeDegreeError):
        cbc1_moments(trained_posterior, barriers[0], np.array([1.0, 0.0]), [0.0])


def test_unsupported_relative_degree(trained_posterior):
    with pytest.raises(RelativeDegreeError):
        cbc_moments(trained_posterior, linear_barrier([1.0, 0.0], degree=3), np.zeros(2), [0.0])


def test_wrong_control_dimension(trained_posterior, barriers):
    with pytest.raises(DimensionError):
        cbc1_moments(trained_posterior, barriers[1], np.array([1.0, 0.0]), [0.0, 1.0])


def test_zero_row_covariance_removes_lie_uncertainty(pendulum_data, barriers):
    prior = DynamicsPrior(np.zeros((2, 2)), np.eye(2), ScalarKernel(np.ones(2), 1.0))
    post = fit_posterior(prior, pendulum_data)
    joint = lie_chain_moments(post, barriers[0], np.array([1.2, 0.3]), [0.7])
    np.testing.assert_array_equal(joint.z_cov, np.zeros((5, 5)))


def test_zero_row_covariance_gives_deterministic_cbc2(pendulum_data, barriers):
    prior = DynamicsPrior(np.zeros((2, 2)), np.eye(2), ScalarKernel(np.ones(2), 1.0))
    post = fit_posterior(prior, pendulum_data)
    bf = barriers[0]
    x, u = np.array([1.2, 0.3]), np.array([0.7])

    def lie(point):
        return float(bf.gradient(point) @ posterior_moments(post, point).f_mean)

    step = 1e-5
    grad_lie = np.array([(lie(x + step * e) - lie(x - step * e)) / (2 * step) for e in np.eye(2)])
    xdot = posterior_moments(post, x).M_k @ augment_control(u)
    k1, k2 = bf.k_alpha
    expected = grad_lie @ xdot + k1 * bf.value(x) + k2 * lie(x)

    moments = cbc2_moments(post, bf, x, u)
    assert moments.variance == 0.0
    assert moments.mean == pytest.approx(expected, rel=1e-6, abs=1e-8)


def test_constant_barrier_has_no_lie_terms(trained_posterior):
    bf = BarrierFunction(
        lambda x: 2.0,
        lambda x: np.zeros(2),
        lambda x: np.zeros((2, 2)),
        relative_degree=2,
        k_alpha=[1.0, 2.0],
        name="constant",
    )
    moments = cbc2_moments(trained_posterior, bf, np.array([0.8, -0.4]), [1.0])
    assert moments.internals.lie_mean == 0.0
    assert moments.internals.lie_var == 0.0
    assert moments.internals.cov_lie_product == 0.0
    np.testing.assert_array_equal(moments.internals.grad_lie_cov, np.zeros((2, 2)))
    assert moments.mean == pytest.approx(2.0)


def test_lie_chain_needs_hessian(trained_posterior):
    bf = BarrierFunction(lambda x: x[0], lambda x: np.array([1.0, 0.0]), relative_degree=1)
    with pytest.raises(ValueError):
        lie_chain_moments(trained_posterior, bf, np.zeros(2), [0.0])


def test_quadratic_of_constants():
    x, y = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
    zeros = np.zeros((2, 2))
    moments = quadratic_inner_moments(x, y, zeros, zeros, zeros)
    assert moments.mean == pytest.approx(-2.0)
    assert moments.variance == 0.0


def test_square_of_standard_normal_is_chi_square():
    moments = quadratic_inner_moments([0.0], [0.0], [[1.0]], [[1.0]], [[1.0]])
    assert moments.mean == pytest.approx(1.0)
    assert moments.variance == pytest.approx(2.0)


def test_quadratic_dimension_mismatch():
    with pytest.raises(DimensionError):
        quadratic_inner_moments(np.zeros(2), np.zeros(3), np.eye(2), np.eye(3), np.zeros((2, 3)))


@pytest.mark.slow
def test_quadratic_moments_match_monte_carlo(rng):
    d = 3
    root = rng.normal(size=(2 * d, 2 * d))
    cov = root @ root.T / (2 * d)
    mean = rng.normal(size=2 * d)
    z = rng.multivariate_normal(mean, cov, size=1_000_000)
    product = np.einsum("si,si->s", z[:, :d], z[:, d:])

    moments = quadratic_inner_moments(mean[:d], mean[d:], cov[:d, :d], cov[d:, d:], cov[:d, d:])
    se = np.sqrt(moments.variance / product.size)
    assert abs(product.mean() - moments.mean) <= 4 * se
    assert np.var(product) == pytest.approx(moments.variance, rel=0.02)
    empirical_cov_x = np.array([np.cov(z[:, i], product)[0, 1] for i in range(d)])
    np.testing.assert_allclose(empirical_cov_x, moments.cov_with_x, atol=0.05 * np.sqrt(moments.variance))


@pytest.mark.slow
def test_cbc1_matches_monte_carlo(trained_posterior, barriers):
    x, u = np.array([1.0, 0.5]), np.array([2.0])
    moments = cbc1_moments(trained_posterior, barriers[1], x, u)
    draws = sample_cbc(trained_posterior, barriers[1], x, u, samples=100_000, seed=3)
    se = np.sqrt(moments.variance / draws.size)
    assert abs(draws.mean() - moments.mean) <= 4 * se
    assert np.var(draws) == pytest.approx(moments.variance, rel=0.05)


@pytest.mark.slow
def test_cbc2_matches_monte_carlo(trained_posterior, barriers, pendulum):
    x, u = np.array([pendulum.theta_c + np.radians(30.0), 1.0]), np.array([1.0])
    moments = cbc2_moments(trained_posterior, barriers[0], x, u)
    draws = sample_cbc(trained_posterior, barriers[0], x, u, samples=100_000, seed=5)
    se = np.sqrt(moments.variance / draws.size)
    assert abs(draws.mean() - moments.mean) <= 4 * se
    assert np.var(draws) == pytest.approx(moments.variance, rel=0.05)


@pytest.mark.parametrize("x, u", [([1.2, 0.4], [1.5]), ([0.3, -1.0], [-4.0]), ([2.5, 2.0], [0.0])])
def test_cbc2_without_lie_gain_is_quadratic_form(trained_posterior, pendulum, x, u):
    bf = pendulum_barriers(pendulum, k_alpha=(2.0, 0.0))[0]
    joint = lie_chain_moments(trained_posterior, bf, x, u)
    product = quadratic_inner_moments(
        joint.grad_lie_mean, joint.xdot_mean, joint.block(0, 0), joint.block(1, 1), joint.block(0, 1)
    )
    moments = cbc2_moments(trained_posterior, bf, x, u)
    assert moments.mean == pytest.approx(product.mean + 2.0 * bf.value(x), rel=1e-12, abs=1e-12)
    assert moments.variance == pytest.approx(product.variance, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("index", [0, 1])
def test_cbc_variance_is_never_negative(trained_posterior, barriers, index):
    rng = np.random.default_rng(20 + index)
    states = np.column_stack([rng.uniform(-np.pi, np.pi, 1000), rng.uniform(-3.0, 3.0, 1000)])
    controls = rng.uniform(-20.0, 20.0, (1000, 1))
    variances = [cbc_moments(trained_posterior, barriers[index], x, u).variance for x, u in zip(states, controls)]
    assert min(variances) >= 0.0


def test_critically_damped_gains_are_accepted():
    result = validate_kalpha([1.0, 2.0], [1.0, 0.0])
    assert result.ok
    np.testing.assert_allclose(result.poles.real, [-1.0, -1.0], atol=1e-6)


def test_complex_poles_are_flagged():
    result = validate_kalpha([1.0, 1.0], [1.0, 0.0])
    assert not result.ok
    assert not result.real_negative
    np.testing.assert_allclose(np.sort(np.abs(result.poles.imag)), [np.sqrt(3) / 2] * 2)


def test_inadmissible_initial_condition():
    result = validate_kalpha([1.0, 2.0], [1.0, -5.0])
    assert result.real_negative
    assert not result.ok


def test_first_order_gain_is_always_valid():
    assert validate_kalpha([0.7], [0.2]).ok


def test_kalpha_length_must_match_initial_vector():
    with pytest.raises(ValueError):
        validate_kalpha([1.0, 2.0], [1.0])


def test_wrong_gradient_fails_derivative_check():
    bf = BarrierFunction(lambda x: x[0] ** 2, lambda x: np.array([x[0], 0.0]), name="bad")
    with pytest.raises(DerivativeCheckError):
        check_derivatives(bf, [np.array([1.0, 0.0])])


def test_pendulum_barrier_derivatives(barriers):
    check_derivatives(barriers[1], [np.array([0.3, -0.7]), np.array([2.0, 1.5])])


def test_degree_two_barrier_needs_gains():
    with pytest.raises(ValueError):
        BarrierFunction(lambda x: 0.0, lambda x: np.zeros(2), relative_degree=2)


def test_nonpositive_alpha_rejected():
    with pytest.raises(ValueError):
        BarrierFunction(lambda x: 0.0, lambda x: np.zeros(2), alpha=0.0)


def test_variance_clamping():
    assert clamp_variance(-1e-9, "test") == 0.0
    assert clamp_variance(0.25, "test") == 0.25
    with pytest.raises(NegativeVarianceError):
        clamp_variance(-1e-3, "test")
