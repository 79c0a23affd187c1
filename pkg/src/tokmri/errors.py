"""Exception types shared across the package.

Exit-code mapping used by the CLI: ConfigError and friends are user errors
(exit 1); TapeConsistencyError signals a broken internal invariant (exit 2).
"""


class TokmriError(Exception):
    """Base class for all package errors."""


class InvalidInputError(TokmriError):
    """Non-finite or otherwise unusable numeric input."""


class ShapeMismatchError(TokmriError):
    """Operands whose dimensions do not agree."""


class GeometryError(TokmriError):
    """Image geometry incompatible with the requested patch layout."""


class ConfigError(TokmriError):
    """Invalid configuration value."""


class NotTrainedError(TokmriError):
    """Operation requires trained weights that are not present."""


class DegenerateDataError(TokmriError):
    """Training data has no usable variation."""


class TrainingDivergedError(TokmriError):
    """Loss became non-finite during training.

    Carries the last finite checkpoint in ``checkpoint`` when available.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class BudgetExhaustedError(TokmriError):
    """Fewer unacquired lines remain than were requested."""


class TapeConsistencyError(TokmriError):
    """Recorded tape does not replay to its own cached values."""


class UndefinedMetricError(TokmriError):
    """Metric is mathematically undefined for the given inputs."""
