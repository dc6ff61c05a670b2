"""Exception types shared across the package."""


class WideBnnError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(WideBnnError, ValueError):
    """An array does not have the shape required by the architecture."""


class ActivationError(WideBnnError, ValueError):
    """The activation does not support the requested decomposition."""


class TrainingDivergedError(WideBnnError, RuntimeError):
    """A non-finite loss was encountered during optimization."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class FactorizationError(WideBnnError, RuntimeError):
    """A Cholesky factorization failed even after jitter escalation."""


class CsvFormatError(WideBnnError, ValueError):
    """A CSV file could not be parsed; carries row/column indices."""

    def __init__(self, message: str, row: int | None = None, col: int | None = None):
        self.row = row
        self.col = col
        loc = ""
        if row is not None:
            loc = f" (row {row}" + (f", col {col})" if col is not None else ")")
        super().__init__(message + loc)


class DegenerateColumnError(WideBnnError, ValueError):
    """A column has zero variance and cannot be standardized."""

    def __init__(self, column: str):
        self.column = column
        super().__init__(f"cannot standardize degenerate column {column!r} (zero std)")


class ConfigError(WideBnnError, ValueError):
    """An experiment configuration is invalid."""
