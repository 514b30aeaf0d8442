"""Exception hierarchy used across the package."""


class ShiftSepError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(ShiftSepError, ValueError):
    pass


class DegenerateInputError(ShiftSepError, ValueError):
    """Input is well-formed but carries no usable signal (zero vectors, empty V)."""


class NumericalFailure(ShiftSepError, ArithmeticError):
    """NaN or Inf appeared in a factor during minimization."""


class InternalConsistencyError(ShiftSepError, RuntimeError):
    pass


class EnsembleUnderfilledError(ShiftSepError):
    """Too few solver runs completed; the partial ensemble is attached."""

    def __init__(self, message, ensemble=None):
        super().__init__(message)
        self.ensemble = ensemble


class SelectionDegenerateError(ShiftSepError):
    """Every solution of an ensemble was eliminated."""


class InsufficientSamplesError(ShiftSepError, ValueError):
    pass


class LocalizationFailedError(ShiftSepError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConstructionFailedError(ShiftSepError):
    """A synthetic waveform pair could not reach the requested similarity."""


class SchemaError(ShiftSepError, ValueError):
    """An input file does not match its expected layout."""

    def __init__(self, path, message, row=None, column=None):
        where = str(path)
        if row is not None:
            where += f", row {row}"
        if column is not None:
            where += f", column {column}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.row = row
        self.column = column
