"""Exception types raised across the package."""


class ItemMetricError(Exception):
    """Base class for all package errors."""


class DataError(ItemMetricError, ValueError):
    """Raised when input data cannot be parsed or violates its schema."""


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class EmptyLogError(DataError):
    pass


class DegenerateSplitError(DataError):
    pass


class MissingTargetError(DataError):
    def __init__(self, item):
        self.item = item
        super().__init__(f"item {item!r} has no rated interactions")


class DimensionError(ItemMetricError, ValueError):
    pass


class InvariantError(ItemMetricError, ValueError):
    pass


class ConfigError(ItemMetricError, ValueError):
    pass


class NumericalError(ItemMetricError, ArithmeticError):
    """Factorization or evaluation failed after all repair attempts."""

    def __init__(self, message, jitter_ladder=()):
        self.jitter_ladder = tuple(jitter_ladder)
        if self.jitter_ladder:
            message = f"{message} (tried jitter {list(self.jitter_ladder)})"
        super().__init__(message)


class DivergenceError(NumericalError):
    """A training loop hit a non-finite loss or gradient.

    ``trace`` holds whatever was recorded before the failure and ``step``
    the offending step index.
    """

    def __init__(self, message, step=None, trace=None):
        self.step = step
        self.trace = trace
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)


class DomainError(ItemMetricError, ValueError):
    pass


class CheckpointError(ItemMetricError):
    """A checkpoint file is missing, unreadable or of the wrong kind."""
