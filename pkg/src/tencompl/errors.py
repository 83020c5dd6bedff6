"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps these onto exit codes: configuration problems are usage
errors (1), malformed or inconsistent data are data errors (2) and
non-finite arithmetic is a numeric failure (3).
"""


class TencomplError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ConfigError(TencomplError, ValueError):
    """Invalid parameter or configuration value."""

    exit_code = 1

    def __init__(self, message, flag=None):
        super().__init__(message)
        self.flag = flag


class DataError(TencomplError, ValueError):
    """Input data violates a structural contract."""


class CoordinateRangeError(DataError, IndexError):
    pass


class DuplicateCoordinateError(DataError):
    pass


class UnmappedRowError(DataError):
    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = list(rows)


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DataError):
    pass


class EmptyTensorError(DataError):
    pass


class NormalizationDegenerateError(DataError):
    pass


class NumericError(TencomplError, ArithmeticError):
    """A non-finite value appeared during optimization."""

    exit_code = 3

    def __init__(self, message, coordinate=None):
        if coordinate is not None:
            coordinate = tuple(int(c) for c in coordinate)
            message = f"{message} at coordinate {coordinate}"
        super().__init__(message)
        self.coordinate = coordinate


class SinkError(TencomplError, OSError):
    """Writing streamed output failed."""
