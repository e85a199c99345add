"""Exception hierarchy shared across the package."""


class LesionGNNError(Exception):
    """Base class for all package errors."""


class ShapeError(LesionGNNError, ValueError):
    pass


class ParameterError(LesionGNNError, ValueError):
    pass


class InputError(LesionGNNError, ValueError):
    pass


class UsageError(LesionGNNError, RuntimeError):
    pass


class NumericError(LesionGNNError, ArithmeticError):
    pass


class DegenerateDataError(LesionGNNError, ValueError):
    """Raised when a label vector lacks one of the two classes."""


class MetricUndefinedError(DegenerateDataError):
    pass


class SchemaError(LesionGNNError, ValueError):
    pass


class CohortParseError(SchemaError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)
