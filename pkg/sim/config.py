import math
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PendulumParams(StrictModel):
    """Pendulum with f = [w, -(g/l) sin(theta)] and g = [0, 1/(m l)]; angles in radians."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    mass: float = Field(1.0, gt=0)
    length: float = Field(1.0, gt=0)
    gravity: float = Field(10.0, gt=0)
    theta_c: float = math.pi / 4
    delta_col: float = Field(math.pi / 8, gt=0, lt=math.pi)


class BarrierSettings(StrictModel):
    kind: Literal["deg2", "deg1"] = "deg2"
    alpha: float = Field(1.0, gt=0)
    k_alpha: List[float] = Field(default_factory=lambda: [1.0, 1.0], min_length=2, max_length=2)


class GPSettings(StrictModel):
    """Prior hyperparameters; row_cov and ctrl_cov default to identity matrices."""

    lengthscales: List[float] = Field(default_factory=lambda: [1.0, 1.0], min_length=2, max_length=2)
    signal_variance: float = Field(1.0, gt=0)
    row_cov: Optional[List[List[float]]] = None
    ctrl_cov: Optional[List[List[float]]] = None
    jitter: float = Field(1e-6, ge=0)
    max_train: Optional[int] = Field(None, ge=1)

    @field_validator("lengthscales")
    @classmethod
    def _positive_lengthscales(cls, value):
        if any(v <= 0 for v in value):
            raise ValueError("lengthscales must be positive")
        return value


class ChanceSettings(StrictModel):
    zeta: float = Field(0.01, ge=0)
    confidence: float = Field(0.9, ge=0.5, lt=1.0)
    method: Literal["gauss_quantile", "cantelli"] = "gauss_quantile"


class ControllerSettings(StrictModel):
    Q: List[List[float]] = Field(default_factory=lambda: [[1.0]])
    max_iterations: int = Field(100, ge=1)


class TriggerSettings(StrictModel):
    """Self-triggering data for relative-degree-1 runs; tau_min defaults to dt / 10."""

    b: float = Field(1.0, gt=0)
    tau_cap: float = Field(0.1, gt=0)
    tau_min: Optional[float] = Field(None, gt=0)
    lipschitz_floor: float = Field(1e-3, gt=0)
    lipschitz_radius: float = Field(0.1, gt=0)
    lipschitz_samples: int = Field(64, ge=8)
    chi_samples: int = Field(64, ge=8)


class SimConfig(StrictModel):
    pendulum: PendulumParams = Field(default_factory=PendulumParams)
    x0: Tuple[float, float]
    dt: float = Field(0.01, gt=0)
    horizon: int = Field(500, ge=1)
    substeps: int = Field(4, ge=1)
    epsilon_start: float = Field(1.0, gt=0, le=1)
    epsilon_end: float = Field(0.01, gt=0, le=1)
    epsilon_decay_steps: int = Field(100, ge=1)
    u_bounds: Tuple[float, float] = (-20.0, 20.0)
    seed: int = 0
    refit_every: int = Field(1, ge=1)
    rmse_every: int = Field(50, ge=1)
    barrier: BarrierSettings = Field(default_factory=BarrierSettings)
    gp: GPSettings = Field(default_factory=GPSettings)
    chance: ChanceSettings = Field(default_factory=ChanceSettings)
    controller: ControllerSettings = Field(default_factory=ControllerSettings)
    trigger: TriggerSettings = Field(default_factory=TriggerSettings)

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.epsilon_end > self.epsilon_start:
            raise ValueError("epsilon_end must not exceed epsilon_start")
        if self.u_bounds[0] >= self.u_bounds[1]:
            raise ValueError("u_bounds must satisfy lo < hi")
        return self

    @property
    def tau_min(self) -> float:
        return self.trigger.tau_min if self.trigger.tau_min is not None else self.dt / 10.0
