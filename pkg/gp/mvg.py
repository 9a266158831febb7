import logging
from dataclasses import dataclass
from typing import Annotated, Optional, Tuple

import numpy as np
from numpy.linalg import LinAlgError
from scipy import linalg
from scipy.linalg import lapack

from gp.kernels import DimensionError

# Set up logging
logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12
EIGEN_TOL = 1e-10
BASE_JITTER = 1e-10
RETRY_JITTER = 1e-6


class CovarianceFactorizationError(LinAlgError):
    """Raised when a covariance matrix cannot be factorized as a PSD matrix"""


def _check_covariance(S: np.ndarray, name: str) -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if np.max(np.abs(S - S.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise ValueError(f"{name} is not symmetric")
    if S.size and np.min(np.linalg.eigvalsh(S)) < -EIGEN_TOL * scale:
        raise ValueError(f"{name} is not positive semidefinite")
    return S


def psd_factor(S: np.ndarray) -> np.ndarray:
    """
    Square-root factor L with L @ L.T == S for a symmetric PSD matrix

    Tries a jittered Cholesky factorization first (1e-10 * trace/dim, then 1e-6 * trace/dim)
    and falls back to the pivoted Cholesky factorization for rank-deficient inputs.

    Raises:
        CovarianceFactorizationError: when S is not positive semidefinite
    """
    S = np.asarray(S, dtype=float)
    dim = S.shape[0]
    if dim == 0:
        return np.zeros((0, 0))
    trace = float(np.trace(S))
    if trace == 0.0 and not np.any(S):
        return np.zeros_like(S)
    for level in (BASE_JITTER, RETRY_JITTER):
        jitter = level * abs(trace) / dim
        try:
            return np.linalg.cholesky(S + jitter * np.eye(dim))
        except LinAlgError:
            logger.debug(f"Cholesky failed with jitter {jitter:.3e}, escalating")

    c, piv, rank, info = lapack.dpstrf(S, lower=1)
    if info < 0:
        raise CovarianceFactorizationError(f"pivoted Cholesky rejected argument {-info}")
    L = np.tril(c)
    L[:, rank:] = 0.0
    factor = np.empty_like(L)
    factor[piv - 1] = L
    scale = max(1.0, float(np.max(np.abs(S))))
    residual = float(np.max(np.abs(factor @ factor.T - S)))
    if residual > 1e-8 * scale:
        logger.error(f"Covariance is not PSD: pivoted factor residual {residual:.3e}")
        raise CovarianceFactorizationError(f"matrix is not positive semidefinite (residual {residual:.3e})")
    return factor


@dataclass(frozen=True, eq=False)
class GaussianVec:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = _check_covariance(self.cov, "cov")
        if cov.shape != (mean.size, mean.size):
            raise DimensionError(f"cov shape {cov.shape} does not match mean length {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def logpdf(self, x) -> float:
        diff = np.asarray(x, dtype=float) - self.mean
        chol = linalg.cho_factor(self.cov, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
        return float(-0.5 * (diff.size * np.log(2.0 * np.pi) + logdet + diff @ linalg.cho_solve(chol, diff)))


@dataclass(frozen=True, eq=False)
class MatrixNormal:
    """
    Matrix normal distribution MN(M, A, B) over n x p matrices

    A is the n x n row covariance and B the p x p column covariance, so that
    vec(X) ~ N(vec(M), kron(B, A)) with column stacking.
    """

    mean: np.ndarray
    row_cov: np.ndarray
    col_cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_2d(np.asarray(self.mean, dtype=float))
        row_cov = _check_covariance(self.row_cov, "row_cov")
        col_cov = _check_covariance(self.col_cov, "col_cov")
        n, p = mean.shape
        if row_cov.shape != (n, n):
            raise DimensionError(f"row_cov must be {n}x{n}, got {row_cov.shape}")
        if col_cov.shape != (p, p):
            raise DimensionError(f"col_cov must be {p}x{p}, got {col_cov.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "row_cov", row_cov)
        object.__setattr__(self, "col_cov", col_cov)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mean.shape


def mvg_vectorize(dist: MatrixNormal) -> GaussianVec:
    """Column-stacked Gaussian N(vec(M), kron(B, A))."""
    return GaussianVec(dist.mean.flatten(order="F"), np.kron(dist.col_cov, dist.row_cov))


def mvg_linear_transform(
    dist: Annotated[MatrixNormal, "Distribution of X"],
    left: Annotated[Optional[np.ndarray], "Matrix C applied on the left, shape (d, n)"] = None,
    right: Annotated[Optional[np.ndarray], "Matrix D applied on the right, shape (p, q)"] = None,
) -> Tuple[MatrixNormal, np.ndarray]:
    """
    Distribution of C X D together with cov(vec(C X D), vec(X))

    Args:
        dist (MatrixNormal): distribution of X
        left: optional C, identity when omitted
        right: optional D, identity when omitted

    Returns:
        Tuple[MatrixNormal, np.ndarray]: MN(C M D, C A C^T, D^T B D) and the cross covariance
            kron(D^T B, C A) of the vectorized transformed and original matrices
    """
    if left is None and right is None:
        raise ValueError("at least one of left or right must be given")
    n, p = dist.shape
    C = np.eye(n) if left is None else np.atleast_2d(np.asarray(left, dtype=float))
    D = np.eye(p) if right is None else np.asarray(right, dtype=float)
    if D.ndim == 1:
        D = D.reshape(-1, 1)
    if C.shape[1] != n:
        raise DimensionError(f"left matrix must have {n} columns, got shape {C.shape}")
    if D.shape[0] != p:
        raise DimensionError(f"right matrix must have {p} rows, got shape {D.shape}")

    row_cov = C @ dist.row_cov @ C.T
    col_cov = D.T @ dist.col_cov @ D
    result = MatrixNormal(C @ dist.mean @ D, 0.5 * (row_cov + row_cov.T), 0.5 * (col_cov + col_cov.T))
    cross_cov = np.kron(D.T @ dist.col_cov, C @ dist.row_cov)
    return result, cross_cov


def mvg_sample(
    dist: Annotated[MatrixNormal, "Distribution to sample"],
    seed: Annotated[int, "Seed of the private random generator"],
    count: Annotated[int, "Number of samples"] = 1,
) -> np.ndarray:
    """Samples stacked along the first axis, shape (count, n, p)."""
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    row_factor = psd_factor(dist.row_cov)
    col_factor = psd_factor(dist.col_cov)
    rng = np.random.default_rng(seed)
    n, p = dist.shape
    Z = rng.standard_normal((count, n, p))
    # M + sqrt(A) Z sqrt(B)^T
    return dist.mean[None, :, :] + np.einsum("ij,sjk,lk->sil", row_factor, Z, col_factor)


def mvg_logpdf(dist: MatrixNormal, X: np.ndarray) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape != dist.shape:
        raise DimensionError(f"X must have shape {dist.shape}, got {X.shape}")
    n, p = dist.shape
    try:
        row_chol = linalg.cho_factor(dist.row_cov, lower=True)
        col_chol = linalg.cho_factor(dist.col_cov, lower=True)
    except LinAlgError as e:
        logger.error(f"Singular covariance in matrix normal density: {e}")
        raise CovarianceFactorizationError(f"singular covariance: {e}") from e
    row_logdet = 2.0 * np.sum(np.log(np.diag(row_chol[0])))
    col_logdet = 2.0 * np.sum(np.log(np.diag(col_chol[0])))
    diff = X - dist.mean
    # trace form, kron(B, A) is never built
    quad = np.trace(linalg.cho_solve(col_chol, diff.T) @ linalg.cho_solve(row_chol, diff))
    return float(-0.5 * (n * p * np.log(2.0 * np.pi) + p * row_logdet + n * col_logdet + quad))
