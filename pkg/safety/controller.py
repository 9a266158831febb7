import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Annotated, Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize, special

from gp.dyn_gp import DynamicsPosterior, augment_control, joint_matrix_normal
from gp.kernels import DimensionError
from gp.mvg import mvg_sample
from safety.barrier import BarrierFunction, RelativeDegreeError

# Set up logging
logger = logging.getLogger(__name__)

INTERPOLATION_TOL = 1e-8
BOUNDARY_TOL = 1e-10
NEWTON_TOL = 1e-14
STALL_TOL = 1e-8
DAMPING_START = 1e-12
MAX_DAMPING_ROUNDS = 30
GRID_POINTS = 101
MAX_GRID_SIZE = 10**6
STENCIL_STEP = 1e-4
MIN_CHECK_SAMPLES = 1000
DEFAULT_BOUNDS = (-20.0, 20.0)

MomentFn = Callable[[np.ndarray], Tuple[float, float]]


class InterpolationError(ValueError):
    """Raised when a moment function is not affine/quadratic in the control"""


class ChanceMethod(str, Enum):
    GAUSS_QUANTILE = "gauss_quantile"
    CANTELLI = "cantelli"


@dataclass(frozen=True)
class ChanceSpec:
    """
    Requirement P(CBC >= zeta) >= confidence

    confidence = 0.5 is accepted and gives a zero multiplier.
    """

    zeta: float = 0.01
    confidence: float = 0.9
    method: ChanceMethod = ChanceMethod.GAUSS_QUANTILE

    def __post_init__(self):
        if self.zeta < 0:
            raise ValueError(f"zeta must be non-negative, got {self.zeta}")
        if not 0.5 <= self.confidence < 1.0:
            raise ValueError(f"confidence must lie in [0.5, 1), got {self.confidence}")
        object.__setattr__(self, "method", ChanceMethod(self.method))

    @property
    def beta(self) -> float:
        if self.method is ChanceMethod.CANTELLI:
            return float(np.sqrt(self.confidence / (1.0 - self.confidence)))
        return float(np.sqrt(2.0) * abs(special.erfinv(1.0 - 2.0 * self.confidence)))


@dataclass(frozen=True, eq=False)
class SocConstraint:
    """
    Deterministic form c^T u + d - zeta >= beta * sqrt(u^T P u + q^T u + r)
    """

    c: np.ndarray
    d: float
    P: np.ndarray
    q: np.ndarray
    r: float
    beta: float
    zeta: float = 0.0

    @property
    def dim(self) -> int:
        return self.c.size

    def mean(self, u) -> float:
        return float(self.c @ u + self.d)

    def variance(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return max(float(u @ self.P @ u + self.q @ u + self.r), 0.0)

    def margin(self, u) -> float:
        """E[CBC](u) - zeta - beta * sqrt(Var[CBC](u))."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return self.mean(u) - self.zeta - self.beta * np.sqrt(self.variance(u))

    def margin_gradient(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        std = np.sqrt(self.variance(u))
        if std <= 1e-300:
            return self.c.copy()
        return self.c - self.beta * (2.0 * self.P @ u + self.q) / (2.0 * std)

    def margin_hessian(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        std = np.sqrt(self.variance(u))
        if std <= 1e-300:
            return np.zeros((self.dim, self.dim))
        grad_std = (2.0 * self.P @ u + self.q) / (2.0 * std)
        return -self.beta * (self.P / std - np.outer(grad_std, grad_std) / std)


@dataclass(frozen=True, eq=False)
class ControlSolution:
    u: np.ndarray
    objective: float
    feasible: bool
    margin: float
    iterations: int
    converged: bool = True


def _interpolation_points(m: int):
    eye = np.eye(m)
    points = [np.zeros(m)]
    points += [eye[i] for i in range(m)]
    points += [-eye[i] for i in range(m)]
    points += [eye[i] + eye[j] for i, j in itertools.combinations(range(m), 2)]
    return points


def chance_to_deterministic(
    moment_fn: Annotated[MomentFn, "Maps a control to (E[CBC], Var[CBC])"],
    spec: Annotated[ChanceSpec, "Chance constraint"],
    m: Annotated[int, "Control dimension"],
) -> SocConstraint:
    """
    Extract the affine mean and quadratic variance of the CBC by exact interpolation

    The mean is read at 0 and the unit vectors; the variance additionally at -e_i and
    e_i + e_j, (m+1)(m+2)/2 points in total. One extra point verifies the fit.

    Raises:
        InterpolationError: when the verification residual exceeds 1e-8
    """
    if m < 1:
        raise ValueError(f"control dimension must be positive, got {m}")
    points = _interpolation_points(m)
    values = [moment_fn(u) for u in points]
    means = np.array([float(v[0]) for v in values])
    variances = np.array([float(v[1]) for v in values])

    d = means[0]
    c = means[1:m + 1] - d
    r = variances[0]
    plus = variances[1:m + 1]
    minus = variances[m + 1:2 * m + 1]
    q = 0.5 * (plus - minus)
    P = np.diag(0.5 * (plus + minus) - r)
    for idx, (i, j) in enumerate(itertools.combinations(range(m), 2)):
        pair = variances[2 * m + 1 + idx]
        P[i, j] = P[j, i] = 0.5 * (pair - r - q[i] - q[j] - P[i, i] - P[j, j])

    check = np.linspace(0.37, -0.61, m) if m > 1 else np.array([0.37])
    check_mean, check_var = moment_fn(check)
    mean_residual = abs(float(check_mean) - float(c @ check + d))
    var_residual = abs(float(check_var) - float(check @ P @ check + q @ check + r))
    scale_mean = 1.0 + np.max(np.abs(means))
    scale_var = 1.0 + np.max(np.abs(variances))
    if mean_residual > INTERPOLATION_TOL * scale_mean or var_residual > INTERPOLATION_TOL * scale_var:
        logger.error(f"Moment interpolation residuals {mean_residual:.3e} (mean), {var_residual:.3e} (variance)")
        raise InterpolationError("moment function is not affine in the mean and quadratic in the variance")

    eigvals, eigvecs = np.linalg.eigh(0.5 * (P + P.T))
    P = (eigvecs * np.clip(eigvals, 0.0, None)) @ eigvecs.T
    return SocConstraint(c, float(d), 0.5 * (P + P.T), q, max(float(r), 0.0), spec.beta, spec.zeta)


def _objective(Q: np.ndarray, u: np.ndarray, u_ref: np.ndarray) -> float:
    diff = u - u_ref
    return float(diff @ Q @ diff)


def _grid_axes(lo: np.ndarray, hi: np.ndarray):
    m = lo.size
    per_dim = GRID_POINTS
    if GRID_POINTS**m > MAX_GRID_SIZE:
        per_dim = max(3, int(MAX_GRID_SIZE ** (1.0 / m)))
    return [np.linspace(lo[i], hi[i], per_dim) for i in range(m)]


def _margin_grid(con: SocConstraint, lo: np.ndarray, hi: np.ndarray):
    axes = _grid_axes(lo, hi)
    grid = np.array(np.meshgrid(*axes, indexing="ij")).reshape(lo.size, -1).T
    means = grid @ con.c + con.d
    variances = np.einsum("si,ij,sj->s", grid, con.P, grid) + grid @ con.q + con.r
    margins = means - con.zeta - con.beta * np.sqrt(np.clip(variances, 0.0, None))
    return axes, grid, margins


def maximize_margin(con: SocConstraint, lo: np.ndarray, hi: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Control with the largest probabilistic margin inside the box

    A coarse grid with 101 points per dimension is polished locally.
    """
    axes, grid, margins = _margin_grid(con, lo, hi)
    best = grid[int(np.argmax(margins))]

    if lo.size == 1:
        step = (hi[0] - lo[0]) / (axes[0].size - 1)
        left, right = max(lo[0], best[0] - step), min(hi[0], best[0] + step)
        res = optimize.minimize_scalar(
            lambda v: -con.margin([v]), bounds=(left, right), method="bounded", options={"xatol": 1e-12}
        )
        candidate = np.array([res.x])
    else:
        res = optimize.minimize(
            lambda v: -con.margin(v),
            best,
            jac=lambda v: -con.margin_gradient(v),
            bounds=list(zip(lo, hi)),
            method="L-BFGS-B",
        )
        candidate = np.clip(res.x, lo, hi)
    if con.margin(candidate) >= con.margin(best):
        best = candidate
    return best, con.margin(best)


def _solve_scalar(Q, u_ref, con, lo, hi, peak) -> ControlSolution:
    phi = lambda v: con.margin([v])
    left = lo[0]
    if phi(left) < 0:
        left = optimize.brentq(phi, lo[0], peak[0], xtol=BOUNDARY_TOL)
    right = hi[0]
    if phi(right) < 0:
        right = optimize.brentq(phi, peak[0], hi[0], xtol=BOUNDARY_TOL)
    u = np.array([min(max(u_ref[0], left), right)])
    return ControlSolution(u, _objective(Q, u, u_ref), True, con.margin(u), 1)


def _barrier_terms(con, u, lo, hi):
    phi = con.margin(u)
    grad_phi = con.margin_gradient(u)
    grad = -grad_phi / phi - 1.0 / (u - lo) + 1.0 / (hi - u)
    hess = (
        np.outer(grad_phi, grad_phi) / phi**2
        - con.margin_hessian(u) / phi
        + np.diag(1.0 / (u - lo) ** 2 + 1.0 / (hi - u) ** 2)
    )
    value = -np.log(phi) - np.sum(np.log(u - lo)) - np.sum(np.log(hi - u))
    return value, grad, hess


def _strictly_inside(con, u, lo, hi) -> bool:
    return bool(np.all(u > lo) and np.all(u < hi) and con.margin(u) > 0)


def _newton_step(hess: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # damp until the Cholesky factor exists
    hess = 0.5 * (hess + hess.T)
    eye = np.eye(grad.size)
    scale = max(1.0, float(np.max(np.abs(np.diag(hess)))))
    damping = 0.0
    for _ in range(MAX_DAMPING_ROUNDS):
        try:
            factor = linalg.cho_factor(hess + damping * eye)
            return -linalg.cho_solve(factor, grad)
        except linalg.LinAlgError:
            damping = max(10.0 * damping, DAMPING_START * scale)
    return -grad / scale


def _start_point(Q, u_ref, con, lo, hi, peak):
    _, grid, margins = _margin_grid(con, lo, hi)
    inside = np.all((grid > lo) & (grid < hi), axis=1) & (margins > 0)
    if np.any(inside):
        candidates = grid[inside]
        diffs = candidates - u_ref
        return candidates[int(np.argmin(np.einsum("si,ij,sj->s", diffs, Q, diffs)))]
    return np.clip(peak, lo + 1e-9 * (hi - lo), hi - 1e-9 * (hi - lo))


def _solve_interior(Q, u_ref, con, lo, hi, start, max_iterations) -> ControlSolution:
    """Log-barrier interior point with barrier weights 1, 0.1, ..., 1e-8 and damped Newton steps."""
    u = start.copy()
    iterations = 0
    converged = True
    for mu in 10.0 ** -np.arange(0, 9):
        for _ in range(max_iterations):
            iterations += 1
            b_value, b_grad, b_hess = _barrier_terms(con, u, lo, hi)
            grad = 2.0 * Q @ (u - u_ref) + mu * b_grad
            hess = 2.0 * Q + mu * b_hess
            if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
                converged = False
                break
            step = _newton_step(hess, grad)
            decrement = float(-grad @ step)
            value = _objective(Q, u, u_ref) + mu * b_value
            if decrement / 2.0 <= NEWTON_TOL * (1.0 + abs(value)):
                break
            t = 1.0
            while t > 1e-12:
                trial = u + t * step
                if _strictly_inside(con, trial, lo, hi):
                    trial_value = _objective(Q, trial, u_ref) + mu * _barrier_terms(con, trial, lo, hi)[0]
                    if trial_value <= value - 0.25 * t * decrement:
                        break
                t *= 0.5
            if t <= 1e-12:
                # no representable decrease left at this weight
                if decrement / 2.0 > STALL_TOL * (1.0 + abs(value)):
                    converged = False
                break
            u = trial
        else:
            converged = False
        if not converged:
            break

    objective = _objective(Q, u, u_ref)
    if not converged:
        logger.warning(f"Interior point stalled after {iterations} iterations, objective {objective:.6g}")
    return ControlSolution(u, objective, converged, con.margin(u), iterations, converged)


def solve_safe_control(
    Q: Annotated[np.ndarray, "Positive definite objective weight, shape (m, m)"],
    u_ref: Annotated[np.ndarray, "Reference control"],
    con: Annotated[SocConstraint, "Deterministic chance constraint"],
    bounds: Annotated[Optional[Tuple[Sequence[float], Sequence[float]]], "Box bounds (lo, hi)"] = None,
    max_iterations: Annotated[int, "Newton iterations per barrier weight"] = 100,
) -> ControlSolution:
    """
    Minimize (u - u_ref)^T Q (u - u_ref) subject to the cone constraint and box bounds

    For a single control the margin is concave, so the feasible set is one interval whose
    end points are the roots of the boundary equation; u_ref is clamped into it. Larger
    problems use a log-barrier interior point method started from the best strictly
    feasible grid point. Without feasible points the control with the largest margin is
    returned with feasible=False. A stalled interior point returns its last (strictly
    feasible) iterate with feasible=False and converged=False.

    Returns:
        ControlSolution: the control and solver diagnostics
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    u_ref = np.atleast_1d(np.asarray(u_ref, dtype=float))
    m = con.dim
    if Q.shape != (m, m) or u_ref.size != m:
        raise DimensionError(f"Q must be {m}x{m} and u_ref length {m}")
    if not np.allclose(Q, Q.T) or np.min(np.linalg.eigvalsh(Q)) <= 0:
        raise ValueError("Q must be symmetric positive definite")
    if bounds is None:
        bounds = (np.full(m, DEFAULT_BOUNDS[0]), np.full(m, DEFAULT_BOUNDS[1]))
    lo = np.broadcast_to(np.asarray(bounds[0], dtype=float), (m,)).copy()
    hi = np.broadcast_to(np.asarray(bounds[1], dtype=float), (m,)).copy()
    if np.any(lo >= hi):
        raise ValueError("bounds must satisfy lo < hi elementwise")

    u_clip = np.clip(u_ref, lo, hi)
    if np.array_equal(u_clip, u_ref) and con.margin(u_ref) >= 0:
        return ControlSolution(u_ref.copy(), 0.0, True, con.margin(u_ref), 0)

    peak, peak_margin = maximize_margin(con, lo, hi)
    if peak_margin < 0:
        logger.warning(f"Chance constraint infeasible, best margin {peak_margin:.4g}")
        return ControlSolution(peak, _objective(Q, peak, u_ref), False, peak_margin, 0)
    if m == 1:
        return _solve_scalar(Q, u_ref, con, lo, hi, peak)

    if con.margin(u_clip) >= 0 and np.allclose(Q, np.diag(np.diag(Q))):
        # separable objective with a feasible box projection
        return ControlSolution(u_clip, _objective(Q, u_clip, u_ref), True, con.margin(u_clip), 0)
    start = _start_point(Q, u_ref, con, lo, hi, peak)
    if not _strictly_inside(con, start, lo, hi):
        logger.warning("No strictly feasible interior point, returning the margin maximizer")
        return ControlSolution(peak, _objective(Q, peak, u_ref), True, peak_margin, 0, False)
    return _solve_interior(Q, u_ref, con, lo, hi, start, max_iterations)


def sample_cbc(
    post: Annotated[DynamicsPosterior, "Trained dynamics posterior"],
    bf: Annotated[BarrierFunction, "Barrier of relative degree 1 or 2"],
    x: Annotated[np.ndarray, "State"],
    u: Annotated[np.ndarray, "Control"],
    samples: Annotated[int, "Monte-Carlo sample count"] = 100_000,
    seed: Annotated[int, "Sampling seed"] = 0,
) -> np.ndarray:
    """
    Draws of the CBC under the posterior

    Degree-2 barriers sample F jointly at x and x +/- 1e-4 e_i and differentiate L_f h by
    central differences.
    """
    x = np.asarray(x, dtype=float)
    u_aug = augment_control(u)
    n = x.size
    if bf.relative_degree == 1:
        F = mvg_sample(joint_matrix_normal(post, [x]), seed, samples)
        return np.einsum("i,sij,j->s", bf.gradient(x), F, u_aug) + bf.alpha * bf.value(x)
    if bf.relative_degree == 2:
        eye = np.eye(n)
        stencil = [x] + [x + s * STENCIL_STEP * eye[i] for i in range(n) for s in (1.0, -1.0)]
        F = mvg_sample(joint_matrix_normal(post, stencil), seed, samples)
        width = u_aug.size
        lie = [F[:, :, j * width] @ bf.gradient(point) for j, point in enumerate(stencil)]
        grad_lie = np.stack([(lie[1 + 2 * i] - lie[2 + 2 * i]) / (2 * STENCIL_STEP) for i in range(n)], axis=1)
        xdot = F[:, :, :width] @ u_aug
        k1, k2 = bf.k_alpha
        return np.einsum("si,si->s", grad_lie, xdot) + k1 * bf.value(x) + k2 * lie[0]
    raise RelativeDegreeError(f"relative degree {bf.relative_degree} is not supported")


def empirical_chance_check(
    post: Annotated[DynamicsPosterior, "Trained dynamics posterior"],
    bf: Annotated[BarrierFunction, "Barrier of relative degree 1 or 2"],
    x: Annotated[np.ndarray, "State"],
    u: Annotated[np.ndarray, "Control"],
    zeta: Annotated[float, "Threshold of the chance constraint"],
    samples: Annotated[int, "Monte-Carlo sample count"] = 100_000,
    seed: Annotated[int, "Sampling seed"] = 0,
) -> float:
    """Monte-Carlo estimate of P(CBC >= zeta) under the posterior."""
    if samples < MIN_CHECK_SAMPLES:
        raise ValueError(f"at least {MIN_CHECK_SAMPLES} samples are required, got {samples}")
    return float(np.mean(sample_cbc(post, bf, x, u, samples, seed) >= zeta))
