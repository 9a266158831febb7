"""
Experiment package: configuration, artifact export, oracles and the command-line surface.
"""

from .config import PRESETS, ConfigError, ExperimentConfig, GridSpec, load_config
from .oracles import OracleReport, run_oracle_suite
from .runner import run_compare, run_experiment
from .app import ExperimentCLI

__all__ = [
    'PRESETS',
    'ConfigError',
    'ExperimentConfig',
    'GridSpec',
    'load_config',
    'OracleReport',
    'run_oracle_suite',
    'run_compare',
    'run_experiment',
    'ExperimentCLI',
]
