"""
Safety package: barrier moments, the chance-constrained controller and trigger timing.
"""

from .barrier import BarrierFunction, NegativeVarianceError, RelativeDegreeError, cbc_moments, validate_kalpha
from .controller import ChanceMethod, ChanceSpec, SocConstraint, chance_to_deterministic, solve_safe_control
from .trigger import TriggerParams, chi_bound, max_trigger_time, reachability_radius

__all__ = [
    'BarrierFunction',
    'NegativeVarianceError',
    'RelativeDegreeError',
    'cbc_moments',
    'validate_kalpha',
    'ChanceMethod',
    'ChanceSpec',
    'SocConstraint',
    'chance_to_deterministic',
    'solve_safe_control',
    'TriggerParams',
    'chi_bound',
    'max_trigger_time',
    'reachability_radius',
]
