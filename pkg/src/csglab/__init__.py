"""Conditional score guidance for text-conditioned image translation, at toy scale."""

from .errors import CSGError, ConfigError, ContractError, DomainError, NumericalError, StepRangeError
from .schedule import NoiseSchedule, make_schedule
from .sampler import GuidanceConfig, edit

__version__ = "0.1.0"

__all__ = [
    "CSGError", "ConfigError", "ContractError", "DomainError", "NumericalError", "StepRangeError",
    "NoiseSchedule", "make_schedule", "GuidanceConfig", "edit",
]
