"""Exception hierarchy shared by all vish modules."""


class VishError(Exception):
    pass


class InvalidArgumentError(VishError, ValueError):
    pass


class UnsupportedDimensionError(InvalidArgumentError):
    pass


class TargetTypeError(InvalidArgumentError):
    pass


class DataFormatError(InvalidArgumentError):
    """Malformed tabular input; ``line`` is the 1-based line number in the file."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class NumericalError(VishError, ArithmeticError):
    pass


class ConstructionError(NumericalError):
    pass


class DegenerateFeatureError(NumericalError):
    pass


class ConditioningError(NumericalError):
    pass


class NumericalConsistencyError(NumericalError):
    pass


class DiagnosticsError(NumericalError):
    """Non-finite objective; carries the parameter values at the failure point."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
