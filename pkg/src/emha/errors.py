"""Exception types raised across the package."""


class EmhaError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(EmhaError, ValueError):
    """An invalid hyper-parameter or configuration combination."""


class ShapeError(EmhaError, ValueError):
    """Operand extents do not agree."""


class UsageError(EmhaError, ValueError):
    """An operation was called in a state where it is not defined."""


class NonFiniteError(EmhaError, FloatingPointError):
    """A forward op produced NaN or Inf."""


class NondeterminismError(EmhaError, RuntimeError):
    pass


class MetricError(EmhaError, ValueError):
    """A diagnostic metric is undefined for the given input."""


class CheckpointFormatError(EmhaError, ValueError):
    pass


class TrainingDivergedError(EmhaError, RuntimeError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
