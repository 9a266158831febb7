import logging
from dataclasses import dataclass
from enum import Enum
from typing import Annotated, NamedTuple, Optional, Sequence

import numpy as np

# Set up logging
logger = logging.getLogger(__name__)


class DimensionError(ValueError):
    """Raised when vectors or matrices do not have the expected shape"""


class HyperparameterError(ValueError):
    """Raised when a kernel hyperparameter is not strictly positive"""


class KernelKind(str, Enum):
    SQUARED_EXPONENTIAL = "squared_exponential"


class KernelOrder(str, Enum):
    VALUE = "value"
    GRAD = "grad"
    HESSIAN = "hessian"


class KernelEval(NamedTuple):
    value: float
    grad_x: Optional[np.ndarray] = None
    hessian_xx: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class ScalarKernel:
    """
    Squared-exponential kernel with one lengthscale per state dimension

    k(x, x') = signal_variance * exp(-0.5 * sum_i (x_i - x'_i)^2 / l_i^2)
    """

    lengthscales: np.ndarray
    signal_variance: float = 1.0
    kind: KernelKind = KernelKind.SQUARED_EXPONENTIAL

    def __post_init__(self):
        lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if lengthscales.ndim != 1 or lengthscales.size == 0:
            raise DimensionError(f"lengthscales must be a non-empty vector, got shape {lengthscales.shape}")
        if not np.all(np.isfinite(lengthscales)) or np.any(lengthscales <= 0):
            raise HyperparameterError(f"lengthscales must be positive, got {lengthscales.tolist()}")
        if not np.isfinite(self.signal_variance) or self.signal_variance <= 0:
            raise HyperparameterError(f"signal_variance must be positive, got {self.signal_variance}")
        lengthscales.setflags(write=False)
        object.__setattr__(self, "lengthscales", lengthscales)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "kind", KernelKind(self.kind))

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    def _check_point(self, x, name: str) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DimensionError(f"{name} must have shape ({self.dim},), got {x.shape}")
        return x

    def _check_points(self, X, name: str) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1 and X.size == self.dim:
            X = X.reshape(1, -1)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise DimensionError(f"{name} must have shape (k, {self.dim}), got {X.shape}")
        if X.shape[0] == 0:
            raise DimensionError(f"{name} must contain at least one point")
        return X

    def value(self, x, x2) -> float:
        diff = (self._check_point(x, "x") - self._check_point(x2, "x'")) / self.lengthscales
        return self.signal_variance * float(np.exp(-0.5 * diff @ diff))

    def grad(self, x, x2) -> np.ndarray:
        """Gradient in the first argument."""
        x = self._check_point(x, "x")
        x2 = self._check_point(x2, "x'")
        scaled = (x - x2) / self.lengthscales**2
        return -self.value(x, x2) * scaled

    def mixed_hessian(self, x, x2) -> np.ndarray:
        """Mixed second derivative d^2 k / dx dx'^T."""
        x = self._check_point(x, "x")
        x2 = self._check_point(x2, "x'")
        inv_sq = 1.0 / self.lengthscales**2
        scaled = (x - x2) * inv_sq
        return self.value(x, x2) * (np.diag(inv_sq) - np.outer(scaled, scaled))

    def gram(self, X, X2) -> np.ndarray:
        X = self._check_points(X, "X")
        X2 = self._check_points(X2, "X'")
        diff = (X[:, None, :] - X2[None, :, :]) / self.lengthscales
        return self.signal_variance * np.exp(-0.5 * np.einsum("ijd,ijd->ij", diff, diff))

    def cross_grad(self, x, X) -> np.ndarray:
        """Row j is grad_x k(x, X[j])."""
        x = self._check_point(x, "x")
        X = self._check_points(X, "X")
        values = self.gram(x.reshape(1, -1), X)[0]
        return -values[:, None] * (x[None, :] - X) / self.lengthscales**2


def kernel_eval(
    kernel: Annotated[ScalarKernel, "Kernel to evaluate"],
    x: Annotated[Sequence[float], "First argument, shape (n,)"],
    x2: Annotated[Sequence[float], "Second argument, shape (n,)"],
    order: Annotated[KernelOrder, "Highest derivative order requested"] = KernelOrder.VALUE,
) -> KernelEval:
    """
    Evaluate the kernel and, on request, its derivatives

    Args:
        kernel (ScalarKernel): the kernel
        x: first argument
        x2: second argument
        order (KernelOrder): 'value', 'grad' (adds grad_x) or 'hessian' (adds grad_x and
            the mixed derivative d^2 k / dx dx'^T)

    Returns:
        KernelEval: value with the optional derivative fields filled for the requested order
    """
    order = KernelOrder(order)
    value = kernel.value(x, x2)
    if order is KernelOrder.VALUE:
        return KernelEval(value)
    grad = kernel.grad(x, x2)
    if order is KernelOrder.GRAD:
        return KernelEval(value, grad)
    return KernelEval(value, grad, kernel.mixed_hessian(x, x2))


def gram_matrix(
    kernel: Annotated[ScalarKernel, "Kernel to evaluate"],
    X: Annotated[Sequence[Sequence[float]], "Row points, shape (k, n)"],
    X2: Annotated[Sequence[Sequence[float]], "Column points, shape (k', n)"],
) -> np.ndarray:
    return kernel.gram(X, X2)
