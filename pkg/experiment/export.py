import csv
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

from gp.dyn_gp import DynamicsPosterior, posterior_to_dict
from sim.config import PendulumParams
from sim.pendulum import LearningErrorReport
from sim.runner import TrajectoryLog

# Set up logging
logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ("t", "theta", "omega", "u", "u_ref", "h", "cbc_mean", "cbc_var", "tau_k", "feasible")


def _cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def atomic_write_text(path: Path, text: str) -> Path:
    """Write text next to path, then rename over it."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(
            "w", encoding="utf-8", newline="", dir=path.parent, prefix=f".{path.name}.", delete=False
        ) as handle:
            handle.write(text)
            tmp_name = handle.name
        os.replace(tmp_name, path)
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise
    return path


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(value) for value in row])
    return buffer.getvalue()


def trajectory_rows(log: TrajectoryLog) -> List[List[Any]]:
    return [
        [r.t, r.state[0], r.state[1], r.u[0], r.u_ref[0], r.h, r.cbc_mean, r.cbc_var, r.tau, r.feasible]
        for r in log.records
    ]


def write_trajectory_csv(log: TrajectoryLog, path: Path) -> Path:
    """
    Frozen schema t,theta,omega,u,u_ref,h,cbc_mean,cbc_var,tau_k,feasible

    Angles are radians; floats are written with repr so the file is byte-stable.
    """
    return atomic_write_text(path, csv_text(TRAJECTORY_COLUMNS, trajectory_rows(log)))


def write_learning_error_csv(report: LearningErrorReport, path: Path) -> Path:
    return atomic_write_text(path, csv_text(report.COLUMNS, report.rows()))


def write_json(payload: Dict[str, Any], path: Path) -> Path:
    return atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def posterior_payload(post: DynamicsPosterior, pendulum: PendulumParams) -> Dict[str, Any]:
    """posterior.json content: the snapshot plus the plant it was trained on."""
    return {"posterior": posterior_to_dict(post), "pendulum": pendulum.model_dump()}


def summary_payload(
    log: TrajectoryLog,
    config_echo: Dict[str, Any],
    learning: Dict[str, float],
) -> Dict[str, Any]:
    summary = log.summary()
    return {
        "seed": config_echo["seed"],
        "min_h": summary["min_h"],
        "final_rmse": summary["final_rmse"],
        "untrained_rmse": summary["untrained_rmse"],
        "rmse_trace": summary["rmse_trace"],
        "solver": {
            "steps": summary["steps"],
            "infeasible_steps": summary["infeasible_steps"],
            "mean_iterations": summary["mean_solver_iterations"],
        },
        "posterior_size": summary["posterior_size"],
        "aborted": summary["aborted"],
        "learning_error": learning,
        "metadata": log.metadata,
        "config": config_echo,
    }
