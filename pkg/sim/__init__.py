"""
Pendulum simulation and the closed learning-and-control loop.
"""

from .config import SimConfig
from .pendulum import compare_learned_vs_true, integrate_zoh, pendulum_barriers, pendulum_true_dynamics
from .runner import TrajectoryLog, reference_control, run_closed_loop

__all__ = [
    'SimConfig',
    'compare_learned_vs_true',
    'integrate_zoh',
    'pendulum_barriers',
    'pendulum_true_dynamics',
    'TrajectoryLog',
    'reference_control',
    'run_closed_loop',
]
