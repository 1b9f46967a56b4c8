"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError and its
subclasses -> 3, NumericalError and its subclasses -> 4.
"""


class TreemetricError(Exception):
    """Base class for all package errors."""


class ConfigError(TreemetricError, ValueError):
    """Invalid experiment or simulation configuration."""


class DataError(TreemetricError, ValueError):
    """Invalid or degenerate input data."""


class DegenerateInputError(DataError):
    """Structurally valid input that is too small or empty for the operation."""


class NewickParseError(DataError):
    """Malformed Newick text.  Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class IngestionError(DataError):
    """Feature table failed validation.  Carries the offending row labels/numbers."""

    def __init__(self, message: str, rows=()):
        detail = f"{message}"
        rows = list(rows)
        if rows:
            detail += f"; offending rows: {rows}"
        super().__init__(detail)
        self.rows = rows


class QuartetError(DataError):
    """Invalid quartet (duplicate indices, out of range) or misuse of a prior."""


class SupervisionError(DataError):
    """The supervision mode admits no quartets or is inconsistent with the data."""


class NumericalError(TreemetricError, RuntimeError):
    """Numerical failure (divergence, non-convergence)."""


class ConvergenceError(NumericalError):
    """Iterative solver did not converge.  Carries the last iterate."""

    def __init__(self, message: str, lengths=None, residual=None):
        super().__init__(message)
        self.lengths = lengths
        self.residual = residual


class TrainingDivergedError(NumericalError):
    """Training loss became non-finite.  Carries the history up to the abort."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history
