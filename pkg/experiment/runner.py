import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Dict, Optional, Union

from experiment.config import ConfigError, ExperimentConfig, load_grid_spec, pendulum_from_dict, resolve_output_dir
from experiment.export import (
    posterior_payload,
    summary_payload,
    write_json,
    write_learning_error_csv,
    write_trajectory_csv,
)
from experiment.oracles import OracleReport, run_oracle_suite
from gp.dyn_gp import posterior_from_dict
from sim.pendulum import LearningErrorReport, compare_learned_vs_true
from sim.runner import TrajectoryLog, run_closed_loop

# Set up logging
logger = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    log: TrajectoryLog
    learning: LearningErrorReport
    artifacts: Dict[str, Path] = field(default_factory=dict)


def run_experiment(cfg: Annotated[ExperimentConfig, "Validated experiment configuration"]) -> ExperimentResult:
    """
    Run the closed loop and export its artifacts

    Writes trajectory.csv and learning_error.csv ("csv" format) and summary.json and
    posterior.json ("json" format) under the resolved output directory.

    Returns:
        ExperimentResult: the trajectory log, the learning-error report and the written paths
    """
    output = resolve_output_dir(cfg)
    logger.info(f"Starting experiment (seed {cfg.seed}, horizon {cfg.horizon}) writing to {output}")
    log = run_closed_loop(cfg)
    learning = compare_learned_vs_true(log.posterior, cfg.pendulum, cfg.learning_grid.points())

    artifacts: Dict[str, Path] = {}
    if "csv" in cfg.export_formats:
        artifacts["trajectory"] = write_trajectory_csv(log, output / "trajectory.csv")
        artifacts["learning_error"] = write_learning_error_csv(learning, output / "learning_error.csv")
    if "json" in cfg.export_formats:
        echo = cfg.model_dump(mode="json")
        artifacts["summary"] = write_json(summary_payload(log, echo, learning.summary()), output / "summary.json")
        artifacts["posterior"] = write_json(posterior_payload(log.posterior, cfg.pendulum), output / "posterior.json")
    for name, path in artifacts.items():
        logger.info(f"Wrote {name}: {path}")
    return ExperimentResult(log, learning, artifacts)


def run_oracles(
    cfg: Annotated[ExperimentConfig, "Experiment configuration"],
    tolerance_scale: Annotated[Optional[float], "Tolerance multiplier override"] = None,
) -> OracleReport:
    """Run the oracle suite and write oracle_report.json next to the other artifacts."""
    report = run_oracle_suite(cfg, tolerance_scale)
    path = write_json(report.to_dict(), resolve_output_dir(cfg) / "oracle_report.json")
    logger.info(f"Oracle report ({'pass' if report.passed else 'FAIL'}): {path}")
    return report


def run_compare(
    posterior_path: Annotated[Union[str, Path], "posterior.json written by a run"],
    grid: Annotated[str, "Grid spec: JSON file path or inline JSON object"],
    output: Annotated[Optional[Union[str, Path]], "CSV destination"] = None,
) -> LearningErrorReport:
    """
    Compare a stored posterior with the true pendulum on a grid

    Returns:
        LearningErrorReport: the table that was written
    """
    posterior_path = Path(posterior_path)
    try:
        payload = json.loads(posterior_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read posterior snapshot {posterior_path}: {e}") from e
    if not isinstance(payload, dict) or "posterior" not in payload:
        raise ConfigError(f"{posterior_path} is not a posterior snapshot")
    try:
        post = posterior_from_dict(payload["posterior"])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    pendulum = pendulum_from_dict(payload.get("pendulum", {}))
    spec = load_grid_spec(grid)

    report = compare_learned_vs_true(post, pendulum, spec.points())
    destination = Path(output) if output is not None else posterior_path.with_name("learning_error_compare.csv")
    write_learning_error_csv(report, destination)
    logger.info(f"Compared posterior of size {post.size} on {report.grid.shape[0]} points: {report.summary()}")
    return report
