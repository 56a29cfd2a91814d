"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation received or produced non-finite values."""


class MissingGradientError(RuntimeError):
    """An optimizer step was requested for a parameter without a gradient."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is malformed or has an unsupported version."""


class TrainingDiverged(RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, iteration, message=""):
        self.iteration = iteration
        super().__init__(message or f"training diverged at iteration {iteration}")


class NoTumorDetected(RuntimeError):
    """A class map contains no tumor pixels, so the TC score is undefined."""


class UndefinedStatisticError(ValueError):
    """A statistic is undefined for the given inputs (degenerate data)."""


class ConfigError(ValueError):
    """A run or synthesis configuration is invalid or infeasible."""
