"""Exception hierarchy shared across the package."""


class P2ATError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(P2ATError, ValueError):
    """Tensor shapes are inconsistent with an operation."""


class ConfigError(P2ATError, ValueError):
    """A configuration value (kernel spec, model config, run config) is invalid."""


class UsageError(P2ATError, RuntimeError):
    """An API was called in an unsupported way (e.g. non-scalar backward)."""


class NumericalError(P2ATError, FloatingPointError):
    """A kernel produced NaN or Inf."""


class DataError(P2ATError, ValueError):
    """Input data violates its contract (labels out of range, bad manifest)."""


class FormatError(DataError):
    """A binary file could not be decoded."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(DataError):
    """A checkpoint could not be loaded into the target model."""


class MetricError(P2ATError, ValueError):
    """A metric is undefined for the accumulated statistics."""
