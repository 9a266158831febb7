import logging
import math
from dataclasses import dataclass, field
from typing import Annotated, Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import stats

from experiment.config import ORACLE_NAMES, ExperimentConfig
from gp.dyn_gp import (
    Dataset,
    DynamicsPosterior,
    DynamicsPrior,
    augment_control,
    cross_cov_B,
    drift_moments,
    fit_posterior,
    posterior_moments,
)
from gp.kernels import ScalarKernel
from gp.mvg import MatrixNormal, mvg_sample, mvg_vectorize
from safety.barrier import cbc1_moments, cbc2_moments, derivative_errors, quadratic_inner_moments
from safety.controller import ChanceSpec, chance_to_deterministic, sample_cbc
from safety.trigger import TriggerParams, max_trigger_time, reachability_radius
from sim.config import PendulumParams
from sim.pendulum import integrate_zoh, pendulum_barriers, vector_field

# Set up logging
logger = logging.getLogger(__name__)

BASE_Z = 3.0
FAMILY_FALSE_ALARM = 1e-3
VARIANCE_REL_TOL = 0.05
CROSS_COV_TOL = 0.05
DENSE_REL_TOL = 1e-8
STRUCTURE_TOL = 1e-9
TRIGGER_TOL = 1e-12
ENVELOPE_TOL = 1e-9
GRAD_TOL = 1e-5
HESS_TOL = 1e-4
ORACLE_JITTER = 1e-4
FD_POINTS = 200
TRIGGER_TUPLES = 1000
ENVELOPE_SEGMENTS = 100

DEFAULT_INSTANCES = {
    "posterior_kernel_fd": 20,
    "dense_gp": 20,
    "cbc1_mc": 20,
    "cbc2_mc": 10,
    "cbc2_structure": 50,
    "quadratic_mc": 20,
    "mvg_vectorize_mc": 5,
}


@dataclass
class OracleResult:
    name: str
    passed: bool
    observed: float
    tolerance: float
    detail: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "observed": self.observed,
            "tolerance": self.tolerance,
            "detail": self.detail,
        }


@dataclass
class OracleReport:
    results: List[OracleResult] = field(default_factory=list)
    tolerance_scale: float = 1.0
    mutation: Optional[str] = None

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[OracleResult]:
        return [r for r in self.results if not r.passed]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "tolerance_scale": self.tolerance_scale,
            "mutation": self.mutation,
            "oracles": [r.to_dict() for r in self.results],
        }


@dataclass
class OracleContext:
    rng: np.random.Generator
    samples: int
    instances: int
    scale: float
    pendulum: PendulumParams
    alpha: float
    k_alpha: Tuple[float, float]
    mutation: Optional[str] = None

    def seed(self) -> int:
        return int(self.rng.integers(2**31 - 1))


def z_limit(checks: int) -> float:
    """Per-check z-score bound: 3, widened so a correct implementation fails the family with probability 1e-3."""
    return max(BASE_Z, float(stats.norm.ppf(1.0 - FAMILY_FALSE_ALARM / (2.0 * max(checks, 1)))))


def _result(name: str, observed: float, tolerance: float, detail: str) -> OracleResult:
    return OracleResult(name, bool(observed <= tolerance), float(observed), float(tolerance), detail)


def _random_spd(rng: np.random.Generator, d: int, floor: float = 0.3) -> np.ndarray:
    M = rng.normal(size=(d, d))
    return M @ M.T / d + floor * np.eye(d)


def random_posterior(
    rng: np.random.Generator,
    k: int,
    m: int = 1,
    n: int = 2,
    jitter: float = ORACLE_JITTER,
) -> DynamicsPosterior:
    """Posterior with random SPD priors and k random samples in [-2, 2]^n."""
    kernel = ScalarKernel(rng.uniform(0.7, 2.0, size=n), float(rng.uniform(0.5, 1.5)))
    prior = DynamicsPrior(_random_spd(rng, n), _random_spd(rng, m + 1), kernel)
    data = Dataset(
        rng.uniform(-2.0, 2.0, (k, n)),
        rng.uniform(-2.0, 2.0, (k, m)),
        rng.normal(size=(k, n)),
        np.arange(k, dtype=float),
    )
    return fit_posterior(prior, data, jitter)


def pendulum_posterior(rng: np.random.Generator, p: PendulumParams, k: int = 5) -> DynamicsPosterior:
    """Unit-prior posterior on k exact pendulum samples near the upper edge of the unsafe band."""
    theta = p.theta_c + p.delta_col + rng.uniform(-0.3, 0.5, k)
    states = np.column_stack([theta, rng.uniform(-1.0, 1.0, k)])
    controls = rng.uniform(-3.0, 3.0, (k, 1))
    derivs = np.array([vector_field(x, u, p) for x, u in zip(states, controls)])
    prior = DynamicsPrior(np.eye(2), np.eye(2), ScalarKernel(np.ones(2), 1.0))
    return fit_posterior(prior, Dataset(states, controls, derivs, np.arange(k, dtype=float)), ORACLE_JITTER)


def dense_posterior(
    prior: Annotated[DynamicsPrior, "Zero-mean prior"],
    data: Annotated[Dataset, "Training data"],
    jitter: Annotated[float, "Observation noise, relative to the row covariance"],
    x: Annotated[np.ndarray, "First query state"],
    x2: Annotated[np.ndarray, "Second query state"],
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Conditioning of the explicit joint Gaussian of vec(F(x)) and the stacked observations

    Every block is assembled from the prior covariance k(x, x') kron(B, A) and the
    observation maps xdot_i = (u_i^T kron I) vec(F(x_i)); the Kronecker structure of the
    result is never used.

    Returns:
        Tuple[np.ndarray, np.ndarray]: mean of vec(F(x)) and cov(vec(F(x)), vec(F(x2)))
    """
    A, B, kernel = prior.row_cov, prior.ctrl_cov, prior.kernel
    n = A.shape[0]
    k = data.size

    def prior_cov(xa, xb):
        return kernel.value(xa, xb) * np.kron(B, A)

    if k == 0:
        return np.zeros(n * B.shape[0]), prior_cov(x, x2)
    observe = [np.kron(augment_control(u)[None, :], np.eye(n)) for u in data.controls]
    S_yy = np.zeros((k * n, k * n))
    for i in range(k):
        for j in range(k):
            block = observe[i] @ prior_cov(data.states[i], data.states[j]) @ observe[j].T
            if i == j:
                block = block + jitter * A
            S_yy[i * n:(i + 1) * n, j * n:(j + 1) * n] = block

    def cross(xq):
        return np.hstack([prior_cov(xq, data.states[j]) @ observe[j].T for j in range(k)])

    y = data.derivs.reshape(-1)
    S_fy, S_gy = cross(x), cross(x2)
    mean = S_fy @ np.linalg.solve(S_yy, y)
    cov = prior_cov(x, x2) - S_fy @ np.linalg.solve(S_yy, S_gy.T)
    return mean, cov


def _kernel_grad_fd(ctx: OracleContext) -> List[OracleResult]:
    worst = 0.0
    h = 1e-6
    for _ in range(FD_POINTS):
        kernel = ScalarKernel(ctx.rng.uniform(0.5, 2.0, 2), float(ctx.rng.uniform(0.5, 2.0)))
        x, x2 = ctx.rng.uniform(-2.0, 2.0, (2, 2))
        grad = kernel.grad(x, x2)
        fd = np.array([(kernel.value(x + h * e, x2) - kernel.value(x - h * e, x2)) / (2 * h) for e in np.eye(2)])
        worst = max(worst, float(np.max(np.abs(fd - grad) / (1.0 + np.abs(grad)))))
    return [_result("kernel_grad_fd", worst, GRAD_TOL * ctx.scale, f"{FD_POINTS} random point pairs")]


def _kernel_hessian_fd(ctx: OracleContext) -> List[OracleResult]:
    worst = 0.0
    h = 1e-5
    for _ in range(FD_POINTS):
        kernel = ScalarKernel(ctx.rng.uniform(0.5, 2.0, 2), float(ctx.rng.uniform(0.5, 2.0)))
        x, x2 = ctx.rng.uniform(-2.0, 2.0, (2, 2))
        hess = kernel.mixed_hessian(x, x2)
        fd = np.column_stack([(kernel.grad(x, x2 + h * e) - kernel.grad(x, x2 - h * e)) / (2 * h) for e in np.eye(2)])
        worst = max(worst, float(np.max(np.abs(fd - hess) / (1.0 + np.abs(hess)))))
    return [_result("kernel_hessian_fd", worst, HESS_TOL * ctx.scale, f"{FD_POINTS} random point pairs")]


def _posterior_kernel_fd(ctx: OracleContext) -> List[OracleResult]:
    grad_worst = hess_worst = 0.0
    h1, h2 = 1e-5, 1e-3
    eye = np.eye(2)
    for _ in range(ctx.instances):
        post = random_posterior(ctx.rng, int(ctx.rng.integers(1, 6)))
        x = ctx.rng.uniform(-2.0, 2.0, 2)
        dm = drift_moments(post, x)
        jac = np.column_stack(
            [(posterior_moments(post, x + h1 * e).f_mean - posterior_moments(post, x - h1 * e).f_mean) / (2 * h1) for e in eye]
        )
        rows = np.array([(cross_cov_B(post, x + h1 * e, x)[0] - cross_cov_B(post, x - h1 * e, x)[0]) / (2 * h1) for e in eye])
        var_grad = rows[:, 0]
        hess = np.empty((2, 2))
        for i, ei in enumerate(eye):
            for j, ej in enumerate(eye):
                hess[i, j] = (
                    cross_cov_B(post, x + h2 * ei, x + h2 * ej)[0, 0]
                    - cross_cov_B(post, x + h2 * ei, x - h2 * ej)[0, 0]
                    - cross_cov_B(post, x - h2 * ei, x + h2 * ej)[0, 0]
                    + cross_cov_B(post, x - h2 * ei, x - h2 * ej)[0, 0]
                ) / (4 * h2 * h2)
        for analytic, numeric in ((dm.jacobian, jac), (dm.variance_grad, var_grad), (dm.ctrl_cov_row_grad, rows)):
            grad_worst = max(grad_worst, float(np.max(np.abs(numeric - analytic) / (1.0 + np.abs(analytic)))))
        hess_worst = max(hess_worst, float(np.max(np.abs(hess - dm.variance_hessian) / (1.0 + np.abs(hess)))))
    detail = f"{ctx.instances} random posteriors"
    return [
        _result("posterior_kernel_fd:grad", grad_worst, GRAD_TOL * ctx.scale, detail),
        _result("posterior_kernel_fd:hessian", hess_worst, HESS_TOL * ctx.scale, detail),
    ]


def _barrier_fd(ctx: OracleContext) -> List[OracleResult]:
    grad_worst = hess_worst = 0.0
    p = ctx.pendulum
    for bf in pendulum_barriers(p, ctx.alpha, ctx.k_alpha):
        for _ in range(FD_POINTS):
            x = np.array([ctx.rng.uniform(-math.pi, math.pi), ctx.rng.uniform(-3.0, 3.0)])
            grad_err, hess_err = derivative_errors(bf, x)
            grad_worst = max(grad_worst, grad_err)
            hess_worst = max(hess_worst, hess_err)
    detail = f"{FD_POINTS} random states per barrier"
    return [
        _result("barrier_fd:grad", grad_worst, GRAD_TOL * ctx.scale, detail),
        _result("barrier_fd:hessian", hess_worst, HESS_TOL * ctx.scale, detail),
    ]


def _dense_gp(ctx: OracleContext) -> List[OracleResult]:
    worst = 0.0
    for _ in range(ctx.instances):
        post = random_posterior(ctx.rng, int(ctx.rng.integers(1, 6)))
        prior = post.prior
        x = ctx.rng.uniform(-2.0, 2.0, 2)
        for x2 in (x, x + ctx.rng.normal(scale=0.5, size=2)):
            mean, cov = dense_posterior(prior, post.dataset, post.jitter, x, x2)
            B = cross_cov_B(post, x, x2)
            if ctx.mutation == "plus_sign":
                B = 2.0 * prior.kernel.value(x, x2) * prior.ctrl_cov - B
            structured_mean = posterior_moments(post, x).M_k.flatten(order="F")
            scale = np.linalg.norm(prior.kernel.value(x, x) * np.kron(prior.ctrl_cov, prior.row_cov))
            mean_err = np.linalg.norm(structured_mean - mean) / max(np.linalg.norm(mean), 1e-12)
            cov_err = np.linalg.norm(np.kron(B, prior.row_cov) - cov) / scale
            worst = max(worst, float(mean_err), float(cov_err))
    detail = f"{ctx.instances} random datasets with k <= 5" + (f", mutation {ctx.mutation}" if ctx.mutation else "")
    return [_result("dense_gp", worst, DENSE_REL_TOL * ctx.scale, detail)]


def _cbc1_mc(ctx: OracleContext) -> List[OracleResult]:
    _, bf = pendulum_barriers(ctx.pendulum, ctx.alpha, ctx.k_alpha)
    N = ctx.samples
    limit = z_limit(2 * ctx.instances)
    z_mean = z_var = 0.0
    for _ in range(ctx.instances):
        post = random_posterior(ctx.rng, int(ctx.rng.integers(1, 6)))
        x = ctx.rng.uniform(-2.0, 2.0, 2)
        u = ctx.rng.uniform(-3.0, 3.0, 1)
        moments = cbc1_moments(post, bf, x, u)
        draws = sample_cbc(post, bf, x, u, N, ctx.seed())
        z_mean = max(z_mean, abs(draws.mean() - moments.mean) / math.sqrt(max(moments.variance, 1e-300) / N))
        z_var = max(z_var, abs(draws.var(ddof=1) - moments.variance) / (moments.variance * math.sqrt(2.0 / (N - 1))))
    detail = f"{ctx.instances} instances, {N} samples, z-score"
    return [
        _result("cbc1_mc:mean", z_mean, limit * ctx.scale, detail),
        _result("cbc1_mc:variance", z_var, limit * ctx.scale, detail),
    ]


def _cbc2_mc(ctx: OracleContext) -> List[OracleResult]:
    bf, _ = pendulum_barriers(ctx.pendulum, ctx.alpha, ctx.k_alpha)
    N = ctx.samples
    limit = z_limit(ctx.instances)
    z_mean = var_err = 0.0
    for _ in range(ctx.instances):
        post = pendulum_posterior(ctx.rng, ctx.pendulum)
        x = np.array([ctx.pendulum.theta_c + ctx.pendulum.delta_col + ctx.rng.uniform(0.0, 0.4), ctx.rng.uniform(-0.5, 0.5)])
        u = ctx.rng.uniform(-3.0, 3.0, 1)
        moments = cbc2_moments(post, bf, x, u)
        draws = sample_cbc(post, bf, x, u, N, ctx.seed())
        sample_var = draws.var(ddof=1)
        z_mean = max(z_mean, abs(draws.mean() - moments.mean) / math.sqrt(sample_var / N))
        var_err = max(var_err, abs(sample_var - moments.variance) / sample_var)
    detail = f"{ctx.instances} pendulum instances, {N} samples, stencil 1e-4"
    return [
        _result("cbc2_mc:mean", z_mean, limit * ctx.scale, detail + ", z-score"),
        _result("cbc2_mc:variance", var_err, VARIANCE_REL_TOL * ctx.scale, detail + ", relative error"),
    ]


def _cbc2_structure(ctx: OracleContext) -> List[OracleResult]:
    bf, _ = pendulum_barriers(ctx.pendulum, ctx.alpha, ctx.k_alpha)
    worst = 0.0
    for _ in range(ctx.instances):
        post = random_posterior(ctx.rng, int(ctx.rng.integers(1, 6)), m=2)
        x = ctx.rng.uniform(-2.0, 2.0, 2)

        def moment_fn(v, post=post, x=x):
            moments = cbc2_moments(post, bf, x, v)
            return moments.mean, moments.variance

        con = chance_to_deterministic(moment_fn, ChanceSpec(), 2)
        u = ctx.rng.uniform(-3.0, 3.0, 2)
        mean, variance = moment_fn(u)
        mean_res = abs(mean - con.mean(u)) / (1.0 + abs(mean))
        var_res = abs(variance - float(u @ con.P @ u + con.q @ u + con.r)) / (1.0 + abs(variance))
        worst = max(worst, mean_res, var_res)
    return [_result("cbc2_structure", worst, STRUCTURE_TOL * ctx.scale, f"{ctx.instances} instances with m = 2")]


def _quadratic_mc(ctx: OracleContext) -> List[OracleResult]:
    N = ctx.samples
    limit = z_limit(ctx.instances)
    z_mean = var_err = cov_err = 0.0
    for _ in range(ctx.instances):
        d = int(ctx.rng.integers(2, 4))
        cov = _random_spd(ctx.rng, 2 * d)
        mean = ctx.rng.normal(size=2 * d)
        draws = mean + ctx.rng.standard_normal((N, 2 * d)) @ np.linalg.cholesky(cov).T
        xs, ys = draws[:, :d], draws[:, d:]
        q = np.sum(xs * ys, axis=1)
        analytic = quadratic_inner_moments(mean[:d], mean[d:], cov[:d, :d], cov[d:, d:], cov[:d, d:])
        sample_var = q.var(ddof=1)
        z_mean = max(z_mean, abs(q.mean() - analytic.mean) / math.sqrt(sample_var / N))
        var_err = max(var_err, abs(sample_var - analytic.variance) / sample_var)
        empirical = np.array([np.cov(xs[:, i], q)[0, 1] for i in range(d)])
        norm = np.sqrt(np.diag(cov)[:d] * analytic.variance)
        cov_err = max(cov_err, float(np.max(np.abs(empirical - analytic.cov_with_x) / norm)))
    detail = f"{ctx.instances} random Gaussian pairs, {N} samples"
    return [
        _result("quadratic_mc:mean", z_mean, limit * ctx.scale, detail + ", z-score"),
        _result("quadratic_mc:variance", var_err, VARIANCE_REL_TOL * ctx.scale, detail + ", relative error"),
        _result("quadratic_mc:cross_cov", cov_err, CROSS_COV_TOL * ctx.scale, detail + ", correlation error"),
    ]


def _trigger_closed_form(ctx: OracleContext) -> List[OracleResult]:
    rng = ctx.rng
    closed_err = 0.0
    violations = 0
    for _ in range(TRIGGER_TUPLES):
        L, b, L_ah, cap = rng.uniform(0.1, 20.0), rng.uniform(0.1, 5.0), rng.uniform(0.0, 5.0), rng.uniform(0.01, 1.0)
        zeta, chi, xn = rng.uniform(0.0, 0.5), rng.uniform(0.1, 5.0), rng.uniform(1e-3, 20.0)
        params = TriggerParams(L, b, L_ah, cap)
        tau = max_trigger_time(params, zeta, chi, xn)
        reference = min(cap, math.log(1.0 + L * zeta / ((chi * L + L_ah) * xn)) / L)
        closed_err = max(closed_err, abs(tau - reference))
        slack = 1e-15
        if max_trigger_time(params, zeta * 1.1 + 1e-3, chi, xn) < tau - slack:
            violations += 1
        if max_trigger_time(params, zeta, chi * 1.1, xn) > tau + slack:
            violations += 1
        if max_trigger_time(TriggerParams(L, b, L_ah + 0.5, cap), zeta, chi, xn) > tau + slack:
            violations += 1
        if max_trigger_time(params, zeta, chi, xn * 1.1) > tau + slack:
            violations += 1

    p = ctx.pendulum
    L = 1.5 * max(1.0, p.gravity / p.length)
    envelope_excess = -math.inf
    for _ in range(ENVELOPE_SEGMENTS):
        x = np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-2.0, 2.0)])
        u = rng.uniform(-5.0, 5.0, 1)
        xdot_norm = float(np.linalg.norm(vector_field(x, u, p)))
        for s in np.linspace(0.0, 0.1, 11)[1:]:
            x_s = integrate_zoh(p, x, u, float(s), max(1, math.ceil(s / 0.0025)))
            excess = float(np.linalg.norm(x_s - x)) - reachability_radius(L, xdot_norm, float(s))
            envelope_excess = max(envelope_excess, excess)
    return [
        _result("trigger_closed_form", closed_err, TRIGGER_TOL * ctx.scale, f"{TRIGGER_TUPLES} random tuples"),
        _result("trigger_closed_form:monotone", float(violations), 0.0, "violations of zeta/chi/L_alpha_h/xdot monotonicity"),
        _result(
            "trigger_closed_form:envelope",
            max(envelope_excess, 0.0),
            ENVELOPE_TOL * ctx.scale,
            f"{ENVELOPE_SEGMENTS} pendulum ZOH segments, L = {L:g}",
        ),
    ]


def _mvg_vectorize_mc(ctx: OracleContext) -> List[OracleResult]:
    N = ctx.samples
    n, p = 2, 3
    d = n * p
    limit = z_limit(ctx.instances * (d + d * (d + 1) // 2))
    z_max = 0.0
    for _ in range(ctx.instances):
        dist = MatrixNormal(ctx.rng.normal(size=(n, p)), _random_spd(ctx.rng, n), _random_spd(ctx.rng, p))
        target = mvg_vectorize(dist)
        draws = mvg_sample(dist, ctx.seed(), N).transpose(0, 2, 1).reshape(N, d)
        C = target.cov
        z_max = max(z_max, float(np.max(np.abs(draws.mean(axis=0) - target.mean) / np.sqrt(np.diag(C) / N))))
        empirical = np.cov(draws, rowvar=False)
        se = np.sqrt((np.outer(np.diag(C), np.diag(C)) + C**2) / N)
        z_max = max(z_max, float(np.max(np.abs(empirical - C) / se)))
    return [_result("mvg_vectorize_mc", z_max, limit * ctx.scale, f"{ctx.instances} distributions, {N} samples, z-score")]


ORACLES: Dict[str, Callable[[OracleContext], List[OracleResult]]] = {
    "kernel_grad_fd": _kernel_grad_fd,
    "kernel_hessian_fd": _kernel_hessian_fd,
    "posterior_kernel_fd": _posterior_kernel_fd,
    "barrier_fd": _barrier_fd,
    "dense_gp": _dense_gp,
    "cbc1_mc": _cbc1_mc,
    "cbc2_mc": _cbc2_mc,
    "cbc2_structure": _cbc2_structure,
    "quadratic_mc": _quadratic_mc,
    "trigger_closed_form": _trigger_closed_form,
    "mvg_vectorize_mc": _mvg_vectorize_mc,
}


def run_oracle_suite(
    cfg: Annotated[ExperimentConfig, "Experiment configuration"],
    tolerance_scale: Annotated[Optional[float], "Multiplier on every tolerance, overrides the config"] = None,
) -> OracleReport:
    """
    Run the enabled correctness oracles

    Each oracle draws from its own generator seeded by (oracles.seed, oracle index), so
    disabling one oracle does not change the others.

    Returns:
        OracleReport: one entry per check with observed value and tolerance
    """
    settings = cfg.oracles
    scale = settings.tolerance_scale if tolerance_scale is None else tolerance_scale
    if not scale > 0:
        raise ValueError(f"tolerance scale must be positive, got {scale}")
    report = OracleReport(tolerance_scale=scale, mutation=settings.mutation)
    for index, name in enumerate(ORACLE_NAMES):
        if name not in settings.enabled:
            continue
        ctx = OracleContext(
            rng=np.random.default_rng([settings.seed, index]),
            samples=settings.samples,
            instances=settings.instances or DEFAULT_INSTANCES.get(name, 1),
            scale=scale,
            pendulum=cfg.pendulum,
            alpha=cfg.barrier.alpha,
            k_alpha=tuple(cfg.barrier.k_alpha),
            mutation=settings.mutation,
        )
        for result in ORACLES[name](ctx):
            report.results.append(result)
            if result.passed:
                logger.info(f"Oracle {result.name}: observed {result.observed:.3e} (tolerance {result.tolerance:.3e})")
            else:
                logger.error(f"Oracle {result.name} failed: observed {result.observed:.3e} > tolerance {result.tolerance:.3e}")
    return report
