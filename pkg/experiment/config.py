import copy
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import Field, ValidationError, model_validator

from sim.config import PendulumParams, SimConfig, StrictModel

# Set up logging
logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SAFESIM_OUTPUT_ROOT"
ORACLE_NAMES = (
    "kernel_grad_fd",
    "kernel_hessian_fd",
    "posterior_kernel_fd",
    "barrier_fd",
    "dense_gp",
    "cbc1_mc",
    "cbc2_mc",
    "cbc2_structure",
    "quadratic_mc",
    "trigger_closed_form",
    "mvg_vectorize_mc",
)


class ConfigError(ValueError):
    """Raised for unreadable or invalid experiment configuration"""


def _to_radians(data: Dict[str, Any]) -> Dict[str, Any]:
    """Convert the angle-valued fields of a raw config from degrees when angle_unit is deg."""
    if data.get("angle_unit", "rad") != "deg":
        return data
    data = copy.deepcopy(data)
    if isinstance(data.get("x0"), (list, tuple)) and data["x0"]:
        data["x0"] = [math.radians(data["x0"][0]), *data["x0"][1:]]
    pendulum = data.get("pendulum")
    if isinstance(pendulum, dict):
        for key in ("theta_c", "delta_col"):
            if key in pendulum:
                pendulum[key] = math.radians(pendulum[key])
    grid = data.get("learning_grid")
    if isinstance(grid, dict):
        for key in ("theta_min", "theta_max"):
            if key in grid:
                grid[key] = math.radians(grid[key])
    data["angle_unit"] = "rad"
    return data


class OracleSettings(StrictModel):
    enabled: List[str] = Field(default_factory=lambda: list(ORACLE_NAMES))
    samples: int = Field(100_000, ge=1000)
    instances: Optional[int] = Field(None, ge=1)
    tolerance_scale: float = Field(1.0, gt=0)
    mutation: Optional[Literal["plus_sign"]] = None
    seed: int = 0

    @model_validator(mode="after")
    def _known_oracles(self):
        unknown = [name for name in self.enabled if name not in ORACLE_NAMES]
        if unknown:
            raise ValueError(f"unknown oracle(s): {', '.join(unknown)}")
        return self


class GridSpec(StrictModel):
    """Rectangular (theta, omega) grid; theta in radians."""

    theta_min: float = -math.pi
    theta_max: float = math.pi
    theta_points: int = Field(25, ge=1)
    omega_min: float = -3.0
    omega_max: float = 3.0
    omega_points: int = Field(13, ge=1)

    @model_validator(mode="after")
    def _ordered(self):
        if self.theta_min > self.theta_max or self.omega_min > self.omega_max:
            raise ValueError("grid bounds must satisfy min <= max")
        return self

    def points(self) -> np.ndarray:
        thetas = np.linspace(self.theta_min, self.theta_max, self.theta_points)
        omegas = np.linspace(self.omega_min, self.omega_max, self.omega_points)
        return np.array([[theta, omega] for theta in thetas for omega in omegas])


class ExperimentConfig(SimConfig):
    preset: Optional[str] = None
    angle_unit: Literal["deg", "rad"] = "rad"
    output_dir: str = "results"
    export_formats: List[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])
    oracles: OracleSettings = Field(default_factory=OracleSettings)
    learning_grid: GridSpec = Field(default_factory=GridSpec)

    @model_validator(mode="before")
    @classmethod
    def _angles_in_radians(cls, data):
        if isinstance(data, dict):
            return _to_radians(data)
        return data


PRESETS: Dict[str, Dict[str, Any]] = {
    "paper-pendulum": {
        "x0": [math.radians(75.0), -0.01],
        "dt": 0.01,
        "horizon": 500,
        "pendulum": {
            "mass": 1.0,
            "length": 1.0,
            "gravity": 10.0,
            "theta_c": math.radians(45.0),
            "delta_col": math.radians(22.5),
        },
        "epsilon_start": 1.0,
        "epsilon_end": 0.01,
        "epsilon_decay_steps": 100,
        "u_bounds": [-20.0, 20.0],
        "barrier": {"kind": "deg2", "k_alpha": [1.0, 1.0]},
        "chance": {"zeta": 0.01, "confidence": 0.9, "method": "gauss_quantile"},
        "gp": {"lengthscales": [1.0, 1.0], "signal_variance": 0.005, "jitter": 1e-6},
    },
}
PRESETS["paper-pendulum-150"] = {**copy.deepcopy(PRESETS["paper-pendulum"]), "x0": [math.radians(150.0), -0.01]}


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def describe_validation_error(error: ValidationError) -> str:
    messages = []
    for item in error.errors():
        key = ".".join(str(part) for part in item["loc"]) or "config"
        if item["type"] == "missing":
            messages.append(f"missing required key: {key}")
        elif item["type"] == "extra_forbidden":
            messages.append(f"unknown key: {key}")
        else:
            messages.append(f"{key}: {item['msg']}")
    return "; ".join(messages)


def resolve_config(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Apply the named preset (if any) under the given overrides and validate

    Raises:
        ConfigError: unknown preset or schema violation
    """
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    data = _to_radians(data)
    preset = data.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset: {preset} (available: {', '.join(sorted(PRESETS))})")
        data = _merge(PRESETS[preset], data)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(describe_validation_error(e)) from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Load a JSON experiment configuration

    An empty file counts as an empty object.

    Raises:
        ConfigError: unreadable file, parse error (with line and column) or schema violation
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: parse error at line {e.lineno}, column {e.colno}: {e.msg}") from e
    cfg = resolve_config(data)
    logger.info(f"Loaded configuration from {path}" + (f" (preset {cfg.preset})" if cfg.preset else ""))
    return cfg


def load_grid_spec(value: str) -> GridSpec:
    """Grid from a JSON file path or an inline JSON object."""
    path = Path(value)
    try:
        text = path.read_text(encoding="utf-8") if path.is_file() else value
        data = json.loads(text) if text.strip() else {}
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"invalid grid spec {value!r}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("grid spec must be a JSON object")
    data = _to_radians({"learning_grid": data, "angle_unit": data.pop("angle_unit", "rad")})["learning_grid"]
    try:
        return GridSpec.model_validate(data)
    except ValidationError as e:
        raise ConfigError(describe_validation_error(e)) from e


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    """output_dir, relative values taken under $SAFESIM_OUTPUT_ROOT (default: working directory)."""
    output = Path(cfg.output_dir)
    if output.is_absolute():
        return output
    return Path(os.getenv(OUTPUT_ROOT_ENV, ".")) / output


def pendulum_from_dict(data: Dict[str, Any]) -> PendulumParams:
    try:
        return PendulumParams.model_validate(data)
    except ValidationError as e:
        raise ConfigError(describe_validation_error(e)) from e
