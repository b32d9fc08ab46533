"""Exception types shared across the package."""


class CSGError(Exception):
    """Base class for all csglab errors."""


class ConfigError(CSGError, ValueError):
    """Invalid or missing configuration."""


class ContractError(CSGError, ValueError):
    """A caller violated a function's preconditions (shapes, ranges)."""


class DomainError(CSGError, ValueError):
    """A formula was evaluated outside its mathematical domain."""


class StepRangeError(CSGError, IndexError):
    """A timestep index fell outside the range a step function accepts."""


class NumericalError(CSGError, FloatingPointError):
    """A latent or weight became non-finite."""
