import logging
from dataclasses import dataclass
from typing import Annotated

import numpy as np
from scipy.stats import qmc

from gp.dyn_gp import DynamicsPosterior, augment_control, posterior_mean_batch
from safety.barrier import BarrierFunction

# Set up logging
logger = logging.getLogger(__name__)

CHI_INFLATION = 1.05
STATIONARY_TOL = 1e-12
DEFAULT_TAU_CAP = 0.1
LIPSCHITZ_SAMPLES = 64
LIPSCHITZ_INFLATION = 2.0


@dataclass(frozen=True)
class TriggerParams:
    """
    Lipschitz data of the closed-loop vector field between triggers

    Attributes:
        L: Lipschitz constant of F(x(t)) u_aug, holding with confidence q = 1 - exp(-b L)
        b: confidence rate
        L_alpha_h: Lipschitz constant of alpha * h
        tau_cap: upper bound on the inter-trigger time
    """

    L: float
    b: float = 1.0
    L_alpha_h: float = 0.0
    tau_cap: float = DEFAULT_TAU_CAP

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError(f"L must be positive, got {self.L}")
        if not self.b > 0:
            raise ValueError(f"b must be positive, got {self.b}")
        if self.L_alpha_h < 0:
            raise ValueError(f"L_alpha_h must be non-negative, got {self.L_alpha_h}")
        if not self.tau_cap > 0:
            raise ValueError(f"tau_cap must be positive, got {self.tau_cap}")

    @property
    def q(self) -> float:
        return float(-np.expm1(-self.b * self.L))


def trigger_confidence(confidence: float, params: TriggerParams) -> float:
    return confidence * params.q


def reachability_radius(
    L: Annotated[float, "Lipschitz constant of the vector field"],
    xdot_norm: Annotated[float, "Norm of the state derivative at the trigger"],
    s: Annotated[float, "Elapsed time since the trigger"],
) -> float:
    """Radius ||xdot|| (exp(L s) - 1) / L of the ball containing x(t_k + s)."""
    if L <= 0:
        raise ValueError(f"L must be positive, got {L}")
    if xdot_norm < 0 or s < 0:
        raise ValueError(f"xdot_norm and s must be non-negative, got {xdot_norm}, {s}")
    return float(xdot_norm * np.expm1(L * s) / L)


def _unit_ball_points(dim: int, samples: int) -> np.ndarray:
    sampler = qmc.Halton(d=dim, scramble=False)
    # skip the origin
    sampler.fast_forward(1)
    points = []
    while len(points) < samples:
        batch = 2.0 * sampler.random(4 * samples) - 1.0
        points.extend(batch[np.sum(batch**2, axis=1) <= 1.0])
    return np.vstack([np.zeros(dim), np.asarray(points[:samples])])


def chi_bound(
    bf: Annotated[BarrierFunction, "Barrier function"],
    x: Annotated[np.ndarray, "Centre of the ball"],
    radius: Annotated[float, "Ball radius"],
    samples: Annotated[int, "Number of low-discrepancy samples"] = 64,
) -> float:
    """
    Sampled bound on sup ||grad h|| over the ball B(x, radius), inflated by 5%

    The sample set is deterministic and always contains the centre.
    """
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    if samples < 8:
        raise ValueError(f"at least 8 samples are required, got {samples}")
    x = np.asarray(x, dtype=float)
    points = x + radius * _unit_ball_points(x.size, samples)
    norms = [np.linalg.norm(bf.gradient(p)) for p in points]
    return CHI_INFLATION * float(max(norms))


def max_trigger_time(
    params: Annotated[TriggerParams, "Lipschitz data"],
    zeta: Annotated[float, "Constraint tightening"],
    chi: Annotated[float, "Bound on the barrier gradient norm"],
    xdot_norm: Annotated[float, "Norm of the state derivative at the trigger"],
) -> float:
    """
    Longest inter-trigger time for which the tightened constraint still certifies safety

    tau = ln(1 + L zeta / ((chi L + L_alpha_h) ||xdot||)) / L, clamped at tau_cap;
    a stationary state returns tau_cap.
    """
    if zeta < 0:
        raise ValueError(f"zeta must be non-negative, got {zeta}")
    if not chi > 0:
        raise ValueError(f"chi must be positive, got {chi}")
    if xdot_norm <= STATIONARY_TOL:
        return params.tau_cap
    L = params.L
    tau = np.log1p(L * zeta / ((chi * L + params.L_alpha_h) * xdot_norm)) / L
    return float(min(tau, params.tau_cap))


def estimate_lipschitz(
    post: Annotated[DynamicsPosterior, "Trained dynamics posterior"],
    u: Annotated[np.ndarray, "Control held during the interval"],
    x: Annotated[np.ndarray, "Centre of the sample ball"],
    radius: Annotated[float, "Sample ball radius"],
    samples: Annotated[int, "Number of ball samples"] = LIPSCHITZ_SAMPLES,
    floor: Annotated[float, "Lower bound on the estimate"] = 1e-3,
) -> float:
    """Twice the largest pairwise slope of the posterior-mean field over a ball sample, at least floor."""
    x = np.asarray(x, dtype=float)
    points = x + radius * _unit_ball_points(x.size, samples - 1)
    field = posterior_mean_batch(post, points) @ augment_control(u)
    diffs = np.linalg.norm(field[:, None, :] - field[None, :, :], axis=-1)
    dists = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    mask = dists > 0
    slope = float(np.max(diffs[mask] / dists[mask])) if np.any(mask) else 0.0
    estimate = LIPSCHITZ_INFLATION * slope
    if estimate < floor:
        logger.debug(f"Lipschitz estimate {estimate:.3e} raised to floor {floor:.3e}")
        return floor
    return estimate
