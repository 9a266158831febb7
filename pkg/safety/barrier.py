import logging
from dataclasses import dataclass
from typing import Annotated, Callable, Iterable, NamedTuple, Optional, Tuple

import numpy as np

from gp.dyn_gp import DynamicsPosterior, augment_control, drift_moments, posterior_moments
from gp.kernels import DimensionError

# Set up logging
logger = logging.getLogger(__name__)

VARIANCE_CLAMP_TOL = 1e-6
GRAD_CHECK_TOL = 1e-5
HESS_CHECK_TOL = 1e-4
# repeated poles of the companion matrix are only resolved to about sqrt(machine eps)
POLE_IMAG_TOL = 1e-6


class RelativeDegreeError(ValueError):
    """Raised when a barrier is used with moments of the wrong relative degree"""


class NegativeVarianceError(ArithmeticError):
    """Raised when an assembled variance is negative beyond rounding tolerance"""


class DerivativeCheckError(ValueError):
    """Raised when analytic barrier derivatives disagree with finite differences"""


ScalarFn = Callable[[np.ndarray], float]
VectorFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class BarrierFunction:
    """
    Barrier h with analytic derivatives

    Degree 1 barriers use the linear class-K term alpha * h; degree 2 barriers use the
    exponential gains k_alpha applied to [h, L_f h].
    """

    h: ScalarFn
    grad_h: VectorFn
    hess_h: Optional[VectorFn] = None
    relative_degree: int = 1
    alpha: float = 1.0
    k_alpha: Optional[np.ndarray] = None
    name: str = "barrier"

    def __post_init__(self):
        if self.relative_degree < 1:
            raise ValueError(f"relative degree must be at least 1, got {self.relative_degree}")
        if self.relative_degree == 1 and not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.k_alpha is not None:
            k_alpha = np.atleast_1d(np.asarray(self.k_alpha, dtype=float))
            object.__setattr__(self, "k_alpha", k_alpha)
        if self.relative_degree >= 2:
            if self.k_alpha is None or self.k_alpha.size != self.relative_degree:
                raise ValueError(f"k_alpha must have {self.relative_degree} entries for relative degree {self.relative_degree}")

    def value(self, x) -> float:
        return float(self.h(np.asarray(x, dtype=float)))

    def gradient(self, x) -> np.ndarray:
        return np.asarray(self.grad_h(np.asarray(x, dtype=float)), dtype=float).reshape(-1)

    def hessian(self, x) -> np.ndarray:
        if self.hess_h is None:
            raise ValueError(f"barrier '{self.name}' has no Hessian")
        H = np.atleast_2d(np.asarray(self.hess_h(np.asarray(x, dtype=float)), dtype=float))
        return 0.5 * (H + H.T)


def derivative_errors(bf: BarrierFunction, x) -> Tuple[float, float]:
    """Scaled central-difference errors (gradient, Hessian) at x."""
    x = np.asarray(x, dtype=float)
    n = x.size
    grad = bf.gradient(x)
    fd_grad = np.empty(n)
    for j in range(n):
        step = np.zeros(n)
        step[j] = 1e-6
        fd_grad[j] = (bf.value(x + step) - bf.value(x - step)) / 2e-6
    grad_err = float(np.max(np.abs(fd_grad - grad) / (1.0 + np.abs(grad))))
    if bf.hess_h is None:
        return grad_err, 0.0
    hess = bf.hessian(x)
    fd_hess = np.empty((n, n))
    for j in range(n):
        step = np.zeros(n)
        step[j] = 1e-5
        fd_hess[:, j] = (bf.gradient(x + step) - bf.gradient(x - step)) / 2e-5
    return grad_err, float(np.max(np.abs(fd_hess - hess) / (1.0 + np.abs(hess))))


def check_derivatives(
    bf: BarrierFunction,
    points: Iterable[np.ndarray],
    grad_tol: float = GRAD_CHECK_TOL,
    hess_tol: float = HESS_CHECK_TOL,
) -> None:
    """
    Compare analytic gradient and Hessian against central differences

    Raises:
        DerivativeCheckError: on the first point where either derivative disagrees
    """
    for x in points:
        grad_err, hess_err = derivative_errors(bf, x)
        if grad_err > grad_tol:
            raise DerivativeCheckError(f"gradient of '{bf.name}' disagrees with finite differences at {list(x)}")
        if hess_err > hess_tol:
            raise DerivativeCheckError(f"Hessian of '{bf.name}' disagrees with finite differences at {list(x)}")


def clamp_variance(value: float, label: str) -> float:
    """Clamp rounding-level negative variances to zero, raise below -1e-6."""
    if value < -VARIANCE_CLAMP_TOL:
        logger.error(f"Negative variance {value:.3e} in {label}")
        raise NegativeVarianceError(f"{label} variance {value:.3e} is below -{VARIANCE_CLAMP_TOL}")
    return max(float(value), 0.0)


@dataclass(frozen=True, eq=False)
class JointLieMoments:
    """
    Moments of z = [grad L_f h; F(x) u_aug; L_f h] with block sizes (n, n, 1)
    """

    z_mean: np.ndarray
    z_cov: np.ndarray

    @property
    def state_dim(self) -> int:
        return (self.z_mean.size - 1) // 2

    def _slices(self):
        n = self.state_dim
        return slice(0, n), slice(n, 2 * n), slice(2 * n, 2 * n + 1)

    @property
    def grad_lie_mean(self) -> np.ndarray:
        return self.z_mean[self._slices()[0]]

    @property
    def xdot_mean(self) -> np.ndarray:
        return self.z_mean[self._slices()[1]]

    @property
    def lie_mean(self) -> float:
        return float(self.z_mean[-1])

    def block(self, row: int, col: int) -> np.ndarray:
        slices = self._slices()
        return self.z_cov[slices[row], slices[col]]


@dataclass(frozen=True, eq=False)
class CbcInternals:
    lie_mean: float
    lie_var: float
    grad_lie_mean: np.ndarray
    grad_lie_cov: np.ndarray
    product_mean: float
    product_var: float
    cov_lie_product: float
    joint: JointLieMoments


@dataclass(frozen=True, eq=False)
class CbcMoments:
    mean: float
    variance: float
    internals: Optional[CbcInternals] = None


def _require_degree(bf: BarrierFunction, degree: int):
    if bf.relative_degree != degree:
        raise RelativeDegreeError(f"barrier '{bf.name}' has relative degree {bf.relative_degree}, expected {degree}")


def _control(post: DynamicsPosterior, u) -> np.ndarray:
    u_aug = augment_control(u)
    if u_aug.size != post.prior.ctrl_dim + 1:
        raise DimensionError(f"control must have {post.prior.ctrl_dim} entries, got {u_aug.size - 1}")
    return u_aug


def cbc1_moments(
    post: Annotated[DynamicsPosterior, "Trained dynamics posterior"],
    bf: Annotated[BarrierFunction, "Relative-degree-1 barrier"],
    x: Annotated[np.ndarray, "State"],
    u: Annotated[np.ndarray, "Control, shape (m,)"],
) -> CbcMoments:
    """
    Gaussian moments of grad h^T F(x) u_aug + alpha h(x)

    Returns:
        CbcMoments: mean grad h^T M_k u_aug + alpha h and variance (u_aug^T B_k u_aug)(grad h^T A grad h)
    """
    _require_degree(bf, 1)
    x = np.asarray(x, dtype=float)
    u_aug = _control(post, u)
    moments = posterior_moments(post, x)
    grad = bf.gradient(x)
    mean = float(grad @ moments.M_k @ u_aug) + bf.alpha * bf.value(x)
    variance = float(u_aug @ moments.B_kxx @ u_aug) * float(grad @ post.prior.row_cov @ grad)
    return CbcMoments(mean, clamp_variance(variance, "CBC"))


def lie_chain_moments(
    post: Annotated[DynamicsPosterior, "Trained dynamics posterior"],
    bf: Annotated[BarrierFunction, "Barrier with gradient and Hessian"],
    x: Annotated[np.ndarray, "State"],
    u: Annotated[np.ndarray, "Control, shape (m,)"],
) -> JointLieMoments:
    """
    Joint Gaussian moments of the gradient of L_f h, F(x) u_aug and L_f h at x

    With a = grad h(x) and H its Hessian, grad L_f h = H f + J_f^T a. All two-point
    quantities of the drift posterior are evaluated at x' = x.
    """
    x = np.asarray(x, dtype=float)
    u_aug = _control(post, u)
    H = bf.hessian(x)
    a = bf.gradient(x)
    A = post.prior.row_cov
    dm = drift_moments(post, x)

    Aa = A @ a
    aAa = float(a @ Aa)
    HAa = H @ Aa
    s_u = float(dm.ctrl_cov_row @ u_aug)
    grad_s_u = dm.ctrl_cov_row_grad @ u_aug
    k_f, g_f, Hk = dm.variance, dm.variance_grad, dm.variance_hessian

    # Means
    v_mean = H @ dm.mean + dm.jacobian.T @ a
    w_mean = dm.ctrl_mean @ u_aug
    s_mean = float(a @ dm.mean)

    # Covariance blocks
    var_v = k_f * H @ A @ H + np.outer(HAa, g_f) + np.outer(g_f, HAa) + Hk * aAa
    var_w = float(u_aug @ dm.ctrl_cov @ u_aug) * A
    var_s = k_f * aAa
    cov_vw = s_u * H @ A + np.outer(grad_s_u, Aa)
    cov_vs = k_f * HAa + g_f * aAa
    cov_ws = s_u * Aa

    # Assemble z
    n = x.size
    z_mean = np.concatenate([v_mean, w_mean, [s_mean]])
    z_cov = np.zeros((2 * n + 1, 2 * n + 1))
    z_cov[:n, :n] = var_v
    z_cov[n:2 * n, n:2 * n] = var_w
    z_cov[2 * n, 2 * n] = var_s
    z_cov[:n, n:2 * n] = cov_vw
    z_cov[n:2 * n, :n] = cov_vw.T
    z_cov[:n, 2 * n] = z_cov[2 * n, :n] = cov_vs
    z_cov[n:2 * n, 2 * n] = z_cov[2 * n, n:2 * n] = cov_ws
    z_cov = 0.5 * (z_cov + z_cov.T)
    if not (np.all(np.isfinite(z_mean)) and np.all(np.isfinite(z_cov))):
        logger.error(f"Non-finite Lie-derivative moments at x={x.tolist()}")
        raise ValueError("degenerate posterior: non-finite Lie-derivative moments")
    return JointLieMoments(z_mean, z_cov)


class QuadraticMoments(NamedTuple):
    mean: float
    variance: float
    cov_with_x: np.ndarray
    cov_with_y: np.ndarray


def _quadratic_inner(x_mean, y_mean, var_x, var_y, cov_xy):
    x_mean = np.atleast_1d(np.asarray(x_mean, dtype=float))
    y_mean = np.atleast_1d(np.asarray(y_mean, dtype=float))
    d = x_mean.size
    var_x, var_y, cov_xy = (np.atleast_2d(np.asarray(S, dtype=float)) for S in (var_x, var_y, cov_xy))
    if y_mean.size != d or any(S.shape != (d, d) for S in (var_x, var_y, cov_xy)):
        raise DimensionError(f"quadratic form blocks must all be {d}-dimensional")
    mean = float(x_mean @ y_mean + np.trace(cov_xy))
    variance = float(
        np.trace(cov_xy @ cov_xy)
        + np.trace(var_x @ var_y)
        + y_mean @ var_x @ y_mean
        + x_mean @ var_y @ x_mean
        + 2.0 * y_mean @ cov_xy @ x_mean
    )
    return QuadraticMoments(mean, variance, var_x @ y_mean + cov_xy @ x_mean, var_y @ x_mean + cov_xy.T @ y_mean)


def quadratic_inner_moments(x_mean, y_mean, var_x, var_y, cov_xy) -> QuadraticMoments:
    """
    Moments of x^T y for jointly Gaussian x and y

    cov_xy[i, j] = cov(x_i, y_j). Odd central moments of the Gaussian vanish, so
    Var(x^T y) = tr(cov_xy cov_xy) + tr(var_x var_y) + y^T var_x y + x^T var_y x + 2 y^T cov_xy x
    at the means. cov_with_x is cov(x, x^T y) and cov_with_y is cov(y, x^T y).
    """
    raw = _quadratic_inner(x_mean, y_mean, var_x, var_y, cov_xy)
    return raw._replace(variance=clamp_variance(raw.variance, "quadratic form"))


def cbc2_moments(
    post: Annotated[DynamicsPosterior, "Trained dynamics posterior"],
    bf: Annotated[BarrierFunction, "Relative-degree-2 barrier"],
    x: Annotated[np.ndarray, "State"],
    u: Annotated[np.ndarray, "Control, shape (m,)"],
) -> CbcMoments:
    """
    Moments of grad L_f h^T F u_aug + K1 h + K2 L_f h

    The product term is the bilinear form of the first two blocks of z; its covariance with
    L_f h is cov(v, s)^T E[w] + cov(w, s)^T E[v].
    """
    _require_degree(bf, 2)
    if bf.k_alpha is None or bf.k_alpha.size != 2:
        raise ValueError(f"barrier '{bf.name}' needs two exponential gains")
    joint = lie_chain_moments(post, bf, x, u)
    v_mean, w_mean, s_mean = joint.grad_lie_mean, joint.xdot_mean, joint.lie_mean
    product = _quadratic_inner(v_mean, w_mean, joint.block(0, 0), joint.block(1, 1), joint.block(0, 1))
    var_s = float(joint.block(2, 2)[0, 0])
    cov_s_product = float(joint.block(0, 2)[:, 0] @ w_mean + joint.block(1, 2)[:, 0] @ v_mean)

    k1, k2 = bf.k_alpha
    mean = product.mean + k1 * bf.value(x) + k2 * s_mean
    variance = product.variance + k2**2 * var_s + 2.0 * k2 * cov_s_product
    internals = CbcInternals(
        lie_mean=s_mean,
        lie_var=var_s,
        grad_lie_mean=v_mean.copy(),
        grad_lie_cov=joint.block(0, 0).copy(),
        product_mean=product.mean,
        product_var=clamp_variance(product.variance, "Lie product"),
        cov_lie_product=cov_s_product,
        joint=joint,
    )
    return CbcMoments(float(mean), clamp_variance(variance, "CBC2"), internals)


def cbc_moments(post: DynamicsPosterior, bf: BarrierFunction, x, u) -> CbcMoments:
    """Dispatch on the barrier's relative degree."""
    if bf.relative_degree == 1:
        return cbc1_moments(post, bf, x, u)
    if bf.relative_degree == 2:
        return cbc2_moments(post, bf, x, u)
    raise RelativeDegreeError(f"moments for relative degree {bf.relative_degree} are not supported")


class KalphaValidation(NamedTuple):
    ok: bool
    poles: np.ndarray
    real_negative: bool
    ordering_ok: bool


def validate_kalpha(
    k_alpha: Annotated[np.ndarray, "Exponential gains [K1, ..., Kr]"],
    eta0: Annotated[np.ndarray, "Initial transverse vector [h, L_f h, ...]"],
) -> KalphaValidation:
    """
    Check that the integrator-chain closed loop has real negative poles and that the
    initial condition is admissible for them

    With pole magnitudes p_i = -lambda_i (largest first) the recursion
    nu_0 = h, nu_i = d/dt nu_(i-1) + p_i nu_(i-1) must start non-negative for i < r.

    Returns:
        KalphaValidation: ok flag, the poles and the two partial checks
    """
    k_alpha = np.atleast_1d(np.asarray(k_alpha, dtype=float))
    eta0 = np.atleast_1d(np.asarray(eta0, dtype=float))
    r = k_alpha.size
    if r < 1 or eta0.size != r:
        raise ValueError(f"eta0 has {eta0.size} entries but k_alpha implies relative degree {r}")

    companion = np.zeros((r, r))
    companion[np.arange(r - 1), np.arange(1, r)] = 1.0
    companion[-1, :] = -k_alpha
    poles = np.linalg.eigvals(companion)
    real_negative = bool(np.all(np.abs(poles.imag) <= POLE_IMAG_TOL * np.maximum(1.0, np.abs(poles))) and np.all(poles.real < 0))
    if not real_negative:
        logger.warning(f"Gains {k_alpha.tolist()} give poles {np.round(poles, 6).tolist()}, not all real and negative")
        return KalphaValidation(False, poles, False, False)

    magnitudes = np.sort(-poles.real)[::-1]
    nu = np.zeros(r)
    nu[0] = 1.0
    ordering_ok = True
    for i in range(1, r):
        derivative = np.roll(nu, 1)
        derivative[0] = 0.0
        nu = derivative + magnitudes[i - 1] * nu
        if float(nu @ eta0) < -1e-12:
            ordering_ok = False
            break
    return KalphaValidation(ordering_ok, poles, True, ordering_ok)
