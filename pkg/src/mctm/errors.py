"""Exception hierarchy shared across the package."""


class MctmError(Exception):
    """Base class for all package errors."""


class ValidationError(MctmError):
    """Input or state violates a documented contract."""


class NumericError(MctmError):
    """A numeric computation failed (overflow, non-PD matrix, non-finite value)."""


class DegenerateWordError(NumericError):
    """A word has zero probability under every topic."""


class ParseError(MctmError):
    """Malformed input record."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConvergenceWarning(UserWarning):
    """An iterative solver stopped before reaching its tolerance."""
