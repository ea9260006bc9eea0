class QstdbError(Exception):
    """Base class for all package errors."""


class ConfigurationError(QstdbError, ValueError):
    """Inconsistent shapes, geometries or hyperparameters."""


class InputError(QstdbError, ValueError):
    """Malformed or empty user-supplied data."""


class InternalError(QstdbError, RuntimeError):
    """Broken internal invariant (missing records, accumulator overflow)."""


class RunError(QstdbError, RuntimeError):
    """A training run failed, e.g. the loss became NaN."""
