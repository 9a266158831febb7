import logging
from dataclasses import dataclass
from typing import Annotated, Dict, List, Sequence, Tuple

import numpy as np

from gp.dyn_gp import DynamicsPosterior, posterior_mean_batch, posterior_moments
from safety.barrier import BarrierFunction, RelativeDegreeError, check_derivatives
from sim.config import PendulumParams

# Set up logging
logger = logging.getLogger(__name__)

ACTUATION_TOL = 1e-10


class SimulationDivergedError(RuntimeError):
    """Raised when the integrated state stops being finite"""


def pendulum_true_dynamics(x, p: PendulumParams) -> Tuple[np.ndarray, np.ndarray]:
    """
    Drift and actuation of the pendulum

    Returns:
        Tuple[np.ndarray, np.ndarray]: f(x) of shape (2,) and g(x) of shape (2, 1)
    """
    theta, omega = np.asarray(x, dtype=float)
    f = np.array([omega, -(p.gravity / p.length) * np.sin(theta)])
    g = np.array([[0.0], [1.0 / (p.mass * p.length)]])
    return f, g


def vector_field(x, u, p: PendulumParams) -> np.ndarray:
    f, g = pendulum_true_dynamics(x, p)
    return f + g @ np.atleast_1d(np.asarray(u, dtype=float))


def energy(x, p: PendulumParams) -> float:
    theta, omega = x
    return 0.5 * p.mass * p.length**2 * omega**2 + p.mass * p.gravity * p.length * (1.0 - np.cos(theta))


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    wrapped = float(np.mod(theta + np.pi, 2.0 * np.pi) - np.pi)
    return np.pi if wrapped == -np.pi else wrapped


def integrate_zoh(
    p: Annotated[PendulumParams, "Pendulum parameters"],
    x: Annotated[np.ndarray, "Initial state (theta, omega)"],
    u: Annotated[np.ndarray, "Control held over the interval"],
    dt: Annotated[float, "Interval length"],
    substeps: Annotated[int, "Number of RK4 steps"] = 1,
) -> np.ndarray:
    """
    Classical RK4 with the control held constant

    Raises:
        SimulationDivergedError: when the state becomes non-finite
    """
    if dt <= 0 or substeps < 1:
        raise ValueError(f"dt must be positive and substeps at least 1, got {dt}, {substeps}")
    state = np.asarray(x, dtype=float).copy()
    u = np.atleast_1d(np.asarray(u, dtype=float))
    h = dt / substeps
    for _ in range(substeps):
        k1 = vector_field(state, u, p)
        k2 = vector_field(state + 0.5 * h * k1, u, p)
        k3 = vector_field(state + 0.5 * h * k2, u, p)
        k4 = vector_field(state + h * k3, u, p)
        state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(state)):
        logger.error(f"Pendulum state diverged from {np.asarray(x).tolist()} under u={u.tolist()}")
        raise SimulationDivergedError(f"non-finite state {state.tolist()}")
    return state


def _check_points(p: PendulumParams) -> List[np.ndarray]:
    thetas = p.theta_c + np.linspace(-np.pi, np.pi, 9)[1:]
    return [np.array([theta, omega]) for theta in thetas for omega in (-1.5, 0.0, 2.0)]


def pendulum_barriers(
    p: Annotated[PendulumParams, "Pendulum parameters"],
    alpha: Annotated[float, "Class-K gain of the degree-1 barrier"] = 1.0,
    k_alpha: Annotated[Sequence[float], "Exponential gains of the degree-2 barrier"] = (1.0, 1.0),
) -> Tuple[BarrierFunction, BarrierFunction]:
    """
    Barriers keeping theta out of the band theta_c +/- delta_col

    The degree-2 barrier is cos(delta) - cos(theta - theta_c); multiplying it by
    (omega^2 + 1) makes the control appear in the first derivative.

    Returns:
        Tuple[BarrierFunction, BarrierFunction]: (degree-2 barrier, degree-1 barrier)
    """
    cos_delta = np.cos(p.delta_col)
    tc = p.theta_c

    def h2(x):
        return cos_delta - np.cos(x[0] - tc)

    def grad2(x):
        return np.array([np.sin(x[0] - tc), 0.0])

    def hess2(x):
        return np.array([[np.cos(x[0] - tc), 0.0], [0.0, 0.0]])

    def h1(x):
        return h2(x) * (x[1] ** 2 + 1.0)

    def grad1(x):
        return np.array([np.sin(x[0] - tc) * (x[1] ** 2 + 1.0), 2.0 * x[1] * h2(x)])

    def hess1(x):
        cross = 2.0 * x[1] * np.sin(x[0] - tc)
        return np.array([[np.cos(x[0] - tc) * (x[1] ** 2 + 1.0), cross], [cross, 2.0 * h2(x)]])

    deg2 = BarrierFunction(h2, grad2, hess2, relative_degree=2, k_alpha=np.asarray(k_alpha, dtype=float), name="angle")
    deg1 = BarrierFunction(h1, grad1, hess1, relative_degree=1, alpha=alpha, name="angle_velocity")
    points = _check_points(p)
    for bf in (deg2, deg1):
        check_derivatives(bf, points)
    for x in points:
        _, g = pendulum_true_dynamics(x, p)
        if abs(float(deg2.gradient(x) @ g[:, 0])) > ACTUATION_TOL:
            raise RelativeDegreeError("control enters the first derivative of the degree-2 barrier")
    return deg2, deg1


@dataclass
class LearningErrorReport:
    """
    Pointwise absolute error of the posterior mean against the true pendulum

    Arrays have one row per grid point; g columns are flattened row-major.
    """

    grid: np.ndarray
    f_error: np.ndarray
    g_error: np.ndarray
    f_std: np.ndarray
    g_std: np.ndarray

    COLUMNS = (
        "theta", "omega", "f_err_0", "f_err_1", "g_err_0", "g_err_1",
        "f_std_0", "f_std_1", "g_std_0", "g_std_1",
    )

    @property
    def f_rmse(self) -> float:
        return float(np.sqrt(np.mean(self.f_error**2)))

    @property
    def g_rmse(self) -> float:
        return float(np.sqrt(np.mean(self.g_error**2)))

    def rows(self) -> List[List[float]]:
        table = np.hstack([self.grid, self.f_error, self.g_error, self.f_std, self.g_std])
        return table.tolist()

    def summary(self) -> Dict[str, float]:
        return {"f_rmse": self.f_rmse, "g_rmse": self.g_rmse, "points": int(self.grid.shape[0])}


def true_drift_batch(states, p: PendulumParams) -> np.ndarray:
    return np.array([pendulum_true_dynamics(x, p)[0] for x in np.atleast_2d(states)])


def compare_learned_vs_true(
    post: Annotated[DynamicsPosterior, "Trained dynamics posterior"],
    p: Annotated[PendulumParams, "True pendulum parameters"],
    grid: Annotated[Sequence[Sequence[float]], "Evaluation states"],
) -> LearningErrorReport:
    """
    Compare the learned f and g with the truth on a grid

    Returns:
        LearningErrorReport: absolute errors and posterior standard deviations per grid point
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    means = posterior_mean_batch(post, grid)
    A_diag = np.clip(np.diag(post.prior.row_cov), 0.0, None)
    f_error, g_error, f_std, g_std = [], [], [], []
    for x, M in zip(grid, means):
        f, g = pendulum_true_dynamics(x, p)
        f_error.append(np.abs(M[:, 0] - f))
        g_error.append(np.abs(M[:, 1:] - g).reshape(-1))
        B = posterior_moments(post, x).B_kxx
        f_std.append(np.sqrt(max(B[0, 0], 0.0) * A_diag))
        g_std.append(np.concatenate([np.sqrt(max(B[j, j], 0.0) * A_diag) for j in range(1, B.shape[0])]))
    return LearningErrorReport(grid, np.array(f_error), np.array(g_error), np.array(f_std), np.array(g_std))
