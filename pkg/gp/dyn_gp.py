import logging
from dataclasses import dataclass, field
from typing import Annotated, Any, Callable, Dict, NamedTuple, Optional, Sequence

import numpy as np
from numpy.linalg import LinAlgError
from scipy import linalg

from gp.kernels import DimensionError, ScalarKernel
from gp.mvg import GaussianVec, MatrixNormal

# Set up logging
logger = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-6
JITTER_ESCALATION = 100.0
MEAN_FD_STEP = 1e-6


class GramFactorizationError(LinAlgError):
    """Raised when the training Gram matrix stays singular after jitter escalation"""


MeanFn = Callable[[np.ndarray], np.ndarray]


def augment_control(u) -> np.ndarray:
    """Augmented control [1, u] so that F(x) @ augment_control(u) = f(x) + g(x) u."""
    return np.concatenate(([1.0], np.atleast_1d(np.asarray(u, dtype=float))))


@dataclass(frozen=True, eq=False)
class DynamicsPrior:
    """
    Matrix-variate GP prior over F(x) = [f(x) g(x)]

    The covariance of vec(F) between x and x' is kron(ctrl_cov * k(x, x'), row_cov).
    mean_fn defaults to the zero mean; mean_jacobian returns the Jacobian of the drift
    column M0(x)[:, 0] and falls back to central differences when omitted.
    """

    row_cov: np.ndarray
    ctrl_cov: np.ndarray
    kernel: ScalarKernel
    mean_fn: Optional[MeanFn] = None
    mean_jacobian: Optional[MeanFn] = None

    def __post_init__(self):
        row_cov = np.atleast_2d(np.asarray(self.row_cov, dtype=float))
        ctrl_cov = np.atleast_2d(np.asarray(self.ctrl_cov, dtype=float))
        for name, S in (("row_cov", row_cov), ("ctrl_cov", ctrl_cov)):
            if S.shape[0] != S.shape[1]:
                raise DimensionError(f"{name} must be square, got shape {S.shape}")
            if not np.allclose(S, S.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(S)) < -1e-10 * max(1.0, np.max(np.abs(S))):
                raise ValueError(f"{name} must be positive semidefinite")
        if ctrl_cov.shape[0] < 2:
            raise DimensionError("ctrl_cov must cover the drift and at least one control channel")
        if self.kernel.dim != row_cov.shape[0]:
            raise DimensionError(f"kernel dimension {self.kernel.dim} does not match state dimension {row_cov.shape[0]}")
        object.__setattr__(self, "row_cov", row_cov)
        object.__setattr__(self, "ctrl_cov", ctrl_cov)

    @property
    def state_dim(self) -> int:
        return self.row_cov.shape[0]

    @property
    def ctrl_dim(self) -> int:
        return self.ctrl_cov.shape[0] - 1

    def mean(self, x: np.ndarray) -> np.ndarray:
        if self.mean_fn is None:
            return np.zeros((self.state_dim, self.ctrl_dim + 1))
        return np.asarray(self.mean_fn(x), dtype=float).reshape(self.state_dim, self.ctrl_dim + 1)

    def drift_jacobian(self, x: np.ndarray) -> np.ndarray:
        n = self.state_dim
        if self.mean_fn is None:
            return np.zeros((n, n))
        if self.mean_jacobian is not None:
            return np.asarray(self.mean_jacobian(x), dtype=float).reshape(n, n)
        jac = np.empty((n, n))
        for j in range(n):
            step = np.zeros(n)
            step[j] = MEAN_FD_STEP
            jac[:, j] = (self.mean(x + step)[:, 0] - self.mean(x - step)[:, 0]) / (2 * MEAN_FD_STEP)
        return jac


@dataclass(frozen=True, eq=False)
class Dataset:
    states: np.ndarray
    controls: np.ndarray
    derivs: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        controls = np.asarray(self.controls, dtype=float)
        derivs = np.asarray(self.derivs, dtype=float)
        times = np.asarray(self.times, dtype=float).reshape(-1)
        k = times.size
        if states.ndim != 2 or controls.ndim != 2 or derivs.ndim != 2:
            raise DimensionError("states, controls and derivs must be 2-D arrays")
        if not (states.shape[0] == controls.shape[0] == derivs.shape[0] == k):
            raise DimensionError(
                f"dataset lengths differ: states {states.shape[0]}, controls {controls.shape[0]}, "
                f"derivs {derivs.shape[0]}, times {k}"
            )
        if derivs.shape[1] != states.shape[1]:
            raise DimensionError("derivs must have the state dimension")
        if k > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("dataset times must be strictly increasing")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)
        object.__setattr__(self, "derivs", derivs)
        object.__setattr__(self, "times", times)

    @classmethod
    def empty(cls, state_dim: int, ctrl_dim: int) -> "Dataset":
        return cls(np.zeros((0, state_dim)), np.zeros((0, ctrl_dim)), np.zeros((0, state_dim)), np.zeros(0))

    @property
    def size(self) -> int:
        return self.times.size

    def latest(self, max_size: Optional[int]) -> "Dataset":
        """Keep only the most recent max_size samples."""
        if max_size is None or self.size <= max_size:
            return self
        return Dataset(
            self.states[-max_size:], self.controls[-max_size:], self.derivs[-max_size:], self.times[-max_size:]
        )


def approx_state_derivatives(
    states: Annotated[Sequence[Sequence[float]], "Observed states, shape (k, n)"],
    times: Annotated[Sequence[float], "Observation times in seconds, strictly increasing"],
) -> np.ndarray:
    """
    Forward-difference state derivatives (X[i+1] - X[i]) / (t[i+1] - t[i])

    Returns:
        np.ndarray: shape (k - 1, n); callers drop the final (x, u) pair
    """
    X = np.asarray(states, dtype=float)
    t = np.asarray(times, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[0] != t.size:
        raise DimensionError(f"states shape {X.shape} does not match {t.size} timestamps")
    if t.size < 2:
        raise ValueError("at least two samples are needed for finite differences")
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise ValueError("timestamps must be strictly increasing (duplicate or reversed timestamps found)")
    return np.diff(X, axis=0) / dt[:, None]


@dataclass(frozen=True, eq=False)
class DynamicsPosterior:
    """
    Posterior MN(M_k(x), A, B_k(x, x)) of F(x) after conditioning on a dataset

    G = U^T (K kron B) U + jitter I is stored as a Cholesky factor; since U is block
    diagonal in the augmented controls, G[i, j] = k(x_i, x_j) u_i^T B u_j.
    """

    prior: DynamicsPrior
    dataset: Dataset
    jitter: float
    aug_controls: np.ndarray
    ctrl_proj: np.ndarray
    residual: np.ndarray
    weights: np.ndarray
    gram_chol: Optional[tuple] = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.dataset.size

    @property
    def block_ctrl(self) -> np.ndarray:
        """Block-diagonal k(1+m) x k matrix of augmented controls."""
        if self.size == 0:
            return np.zeros((0, 0))
        return linalg.block_diag(*[u.reshape(-1, 1) for u in self.aug_controls])

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return linalg.cho_solve(self.gram_chol, rhs)


def _factor_gram(G: np.ndarray, jitter: float) -> tuple:
    k = G.shape[0]
    base = jitter if jitter > 0 else 1e-10 * max(float(np.trace(G)) / k, 1e-300)
    attempts = [jitter, base * JITTER_ESCALATION, base * JITTER_ESCALATION**2]
    for attempt, value in enumerate(attempts):
        try:
            chol = linalg.cho_factor(G + value * np.eye(k), lower=True)
            if attempt > 0:
                logger.warning(f"Gram matrix needed jitter escalation to {value:.3e}")
            return chol, value
        except LinAlgError:
            continue
    logger.error(f"Gram matrix of size {k} singular after jitter escalation to {attempts[-1]:.3e}")
    raise GramFactorizationError(f"singular Gram matrix after two jitter escalations (last jitter {attempts[-1]:.3e})")


def fit_posterior(
    prior: Annotated[DynamicsPrior, "Matrix-variate GP prior"],
    data: Annotated[Dataset, "Training states, controls and state derivatives"],
    jitter: Annotated[float, "Noise variance added to the Gram diagonal"] = DEFAULT_JITTER,
    max_train: Annotated[Optional[int], "Keep only the most recent samples"] = None,
) -> DynamicsPosterior:
    """
    Condition the prior on (x_i, u_i, xdot_i) triples

    Only one k x k Cholesky factorization is formed; the k(1+m) joint covariance is never
    assembled.

    Args:
        prior (DynamicsPrior): prior over F
        data (Dataset): training data
        jitter (float): observation noise variance on xdot, relative to the row covariance
        max_train (Optional[int]): training window size, None keeps everything

    Returns:
        DynamicsPosterior: immutable posterior
    """
    if jitter < 0:
        raise ValueError(f"jitter must be non-negative, got {jitter}")
    n, m = prior.state_dim, prior.ctrl_dim
    if data.size and (data.states.shape[1] != n or data.controls.shape[1] != m):
        raise DimensionError(
            f"dataset dimensions ({data.states.shape[1]}, {data.controls.shape[1]}) do not match prior ({n}, {m})"
        )
    data = data.latest(max_train)
    k = data.size
    if k == 0:
        return DynamicsPosterior(
            prior, data, jitter, np.zeros((0, m + 1)), np.zeros((0, m + 1)), np.zeros((n, 0)), np.zeros((n, 0))
        )

    aug = np.hstack([np.ones((k, 1)), data.controls])
    ctrl_proj = aug @ prior.ctrl_cov
    K = prior.kernel.gram(data.states, data.states)
    G = K * (ctrl_proj @ aug.T)
    G = 0.5 * (G + G.T)
    chol, used = _factor_gram(G, jitter)

    prior_pred = np.stack([prior.mean(x) @ u for x, u in zip(data.states, aug)], axis=1)
    residual = data.derivs.T - prior_pred
    weights = linalg.cho_solve(chol, residual.T).T
    logger.debug(f"Fitted dynamics posterior on {k} samples")
    return DynamicsPosterior(prior, data, used, aug, ctrl_proj, residual, weights, chol)


def _kernel_vector(post: DynamicsPosterior, x: np.ndarray) -> np.ndarray:
    if post.size == 0:
        return np.zeros(0)
    return post.prior.kernel.gram(x.reshape(1, -1), post.dataset.states)[0]


def _check_state(post: DynamicsPosterior, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (post.prior.state_dim,):
        raise DimensionError(f"state must have shape ({post.prior.state_dim},), got {x.shape}")
    return x


def _mean(post: DynamicsPosterior, x: np.ndarray, kvec: np.ndarray) -> np.ndarray:
    M = post.prior.mean(x)
    if post.size:
        M = M + post.weights @ (kvec[:, None] * post.ctrl_proj)
    return M


def _cross_cov(post: DynamicsPosterior, x, x2, kvec, kvec2) -> np.ndarray:
    B = post.prior.ctrl_cov * post.prior.kernel.value(x, x2)
    if post.size:
        left = kvec[:, None] * post.ctrl_proj
        right = kvec2[:, None] * post.ctrl_proj
        B = B - left.T @ post.solve(right)
    return B


class PosteriorMoments(NamedTuple):
    M_k: np.ndarray
    B_kxx: np.ndarray
    f_mean: np.ndarray
    g_mean: np.ndarray
    kappa_f: float
    b_row: np.ndarray


def posterior_moments(post: DynamicsPosterior, x) -> PosteriorMoments:
    """Mean M_k(x), column covariance B_k(x, x) and their drift components."""
    x = _check_state(post, x)
    kvec = _kernel_vector(post, x)
    M = _mean(post, x, kvec)
    B = _cross_cov(post, x, x, kvec, kvec)
    B = 0.5 * (B + B.T)
    return PosteriorMoments(M, B, M[:, 0].copy(), M[:, 1:].copy(), float(B[0, 0]), B[0].copy())


def cross_cov_B(post: DynamicsPosterior, x, x2) -> np.ndarray:
    """Column covariance B_k(x, x') between F(x) and F(x')."""
    x = _check_state(post, x)
    x2 = _check_state(post, x2)
    B = _cross_cov(post, x, x2, _kernel_vector(post, x), _kernel_vector(post, x2))
    if np.array_equal(x, x2):
        B = 0.5 * (B + B.T)
    return B


def predict_xdot(post: DynamicsPosterior, x, u) -> GaussianVec:
    """Posterior of F(x) u_aug."""
    moments = posterior_moments(post, x)
    u_aug = augment_control(u)
    if u_aug.size != post.prior.ctrl_dim + 1:
        raise DimensionError(f"control must have {post.prior.ctrl_dim} entries, got {u_aug.size - 1}")
    # covariance is (u_aug^T B_k u_aug) A
    scale = float(u_aug @ moments.B_kxx @ u_aug)
    return GaussianVec(moments.M_k @ u_aug, max(scale, 0.0) * post.prior.row_cov)


@dataclass(frozen=True, eq=False)
class DriftMoments:
    """
    Analytic jet of the drift posterior at a single state x (two-point quantities at x' = x)

    Attributes:
        mean: posterior mean of f(x)
        jacobian: Jacobian of the posterior mean of f at x, entry [i, j] = d mean_i / d x_j
        variance: k_f(x, x) = [1, 0] B_k(x, x) [1, 0]^T
        variance_grad: gradient of k_f(x, x') in x, at x' = x
        variance_hessian: mixed derivative d^2 k_f / dx dx'^T at x' = x
        ctrl_mean: M_k(x)
        ctrl_cov: B_k(x, x)
        ctrl_cov_row_grad: gradient in x of the first row of B_k(x, x'), shape (n, 1+m)
    """

    mean: np.ndarray
    jacobian: np.ndarray
    variance: float
    variance_grad: np.ndarray
    variance_hessian: np.ndarray
    ctrl_mean: np.ndarray
    ctrl_cov: np.ndarray
    ctrl_cov_row_grad: np.ndarray

    @property
    def ctrl_cov_row(self) -> np.ndarray:
        return self.ctrl_cov[0]


def drift_moments(post: DynamicsPosterior, x) -> DriftMoments:
    """
    Differentiate the posterior drift kernel analytically

    Kernel derivatives of k(x, x') and of the training kernel vector enter the posterior
    formulas linearly, so no finite differences are involved.
    """
    x = _check_state(post, x)
    prior = post.prior
    kernel = prior.kernel

    # Prior jet
    B00 = prior.ctrl_cov[0, 0]
    k_xx = kernel.value(x, x)
    grad_xx = kernel.grad(x, x)
    hess_xx = kernel.mixed_hessian(x, x)

    kvec = _kernel_vector(post, x)
    M = _mean(post, x, kvec)
    B = _cross_cov(post, x, x, kvec, kvec)
    B = 0.5 * (B + B.T)
    jacobian = prior.drift_jacobian(x)
    variance = float(B[0, 0])
    variance_grad = B00 * grad_xx
    variance_hessian = B00 * hess_xx
    row_grad = np.outer(grad_xx, prior.ctrl_cov[0])

    # Data corrections
    if post.size:
        kgrad = kernel.cross_grad(x, post.dataset.states)
        p0 = post.ctrl_proj[:, 0]
        c = kvec * p0
        Jc = p0[:, None] * kgrad
        jacobian = jacobian + post.weights @ Jc
        solved_c = post.solve(c)
        solved_Jc = post.solve(Jc)
        variance_grad = variance_grad - Jc.T @ solved_c
        variance_hessian = variance_hessian - Jc.T @ solved_Jc
        row_grad = row_grad - Jc.T @ post.solve(kvec[:, None] * post.ctrl_proj)

    variance_hessian = 0.5 * (variance_hessian + variance_hessian.T)
    return DriftMoments(M[:, 0].copy(), jacobian, variance, variance_grad, variance_hessian, M, B, row_grad)


def posterior_mean_batch(post: DynamicsPosterior, states) -> np.ndarray:
    Xs = np.atleast_2d(np.asarray(states, dtype=float))
    means = np.stack([post.prior.mean(x) for x in Xs])
    if post.size:
        K = post.prior.kernel.gram(Xs, post.dataset.states)
        # (s, n, 1+m)
        means = means + np.einsum("nk,sk,kp->snp", post.weights, K, post.ctrl_proj)
    return means


def joint_matrix_normal(post: DynamicsPosterior, points) -> MatrixNormal:
    """
    Joint posterior of [F(x_1) ... F(x_p)] as one matrix normal

    The row covariance is A and the column covariance has blocks B_k(x_i, x_j). Rounding
    noise in the column covariance is removed by clipping its eigenvalues at zero.
    """
    points = [_check_state(post, x) for x in points]
    width = post.prior.ctrl_dim + 1
    kvecs = [_kernel_vector(post, x) for x in points]
    means = [_mean(post, x, kv) for x, kv in zip(points, kvecs)]
    col_cov = np.zeros((len(points) * width, len(points) * width))
    for i, (xi, ki) in enumerate(zip(points, kvecs)):
        for j in range(i, len(points)):
            block = _cross_cov(post, xi, points[j], ki, kvecs[j])
            col_cov[i * width:(i + 1) * width, j * width:(j + 1) * width] = block
            col_cov[j * width:(j + 1) * width, i * width:(i + 1) * width] = block.T
    col_cov = 0.5 * (col_cov + col_cov.T)
    eigvals, eigvecs = np.linalg.eigh(col_cov)
    col_cov = (eigvecs * np.clip(eigvals, 0.0, None)) @ eigvecs.T
    col_cov = 0.5 * (col_cov + col_cov.T)
    return MatrixNormal(np.hstack(means), post.prior.row_cov, col_cov)


def posterior_to_dict(post: DynamicsPosterior) -> Dict[str, Any]:
    """
    JSON-ready snapshot with hyperparameters and data arrays

    Factorizations are not stored; posterior_from_dict refits. Only the zero prior mean
    can be serialized.
    """
    if post.prior.mean_fn is not None:
        raise ValueError("posterior snapshots support the zero prior mean only")
    kernel = post.prior.kernel
    data = post.dataset
    return {
        "prior": {
            "row_cov": post.prior.row_cov.tolist(),
            "ctrl_cov": post.prior.ctrl_cov.tolist(),
            "kernel": {
                "kind": kernel.kind.value,
                "lengthscales": kernel.lengthscales.tolist(),
                "signal_variance": kernel.signal_variance,
            },
        },
        "jitter": post.jitter,
        "data": {
            "states": data.states.tolist(),
            "controls": data.controls.tolist(),
            "derivs": data.derivs.tolist(),
            "times": data.times.tolist(),
        },
    }


def posterior_from_dict(snapshot: Dict[str, Any]) -> DynamicsPosterior:
    try:
        prior_spec = snapshot["prior"]
        kernel_spec = prior_spec["kernel"]
        kernel = ScalarKernel(
            np.asarray(kernel_spec["lengthscales"], dtype=float),
            float(kernel_spec["signal_variance"]),
            kernel_spec.get("kind", "squared_exponential"),
        )
        prior = DynamicsPrior(np.asarray(prior_spec["row_cov"]), np.asarray(prior_spec["ctrl_cov"]), kernel)
        n, m = prior.state_dim, prior.ctrl_dim
        raw = snapshot["data"]
        data = Dataset(
            np.asarray(raw["states"], dtype=float).reshape(-1, n),
            np.asarray(raw["controls"], dtype=float).reshape(-1, m),
            np.asarray(raw["derivs"], dtype=float).reshape(-1, n),
            np.asarray(raw["times"], dtype=float),
        )
        jitter = float(snapshot["jitter"])
    except (KeyError, TypeError) as e:
        logger.error(f"Malformed posterior snapshot: {e}")
        raise ValueError(f"malformed posterior snapshot: {e}") from e
    return fit_posterior(prior, data, jitter)
