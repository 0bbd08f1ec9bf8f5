"""
Exception hierarchy shared by the library and the command-line harness.
The CLI maps UsageError to exit code 1 and DataError (and subclasses) to 2.
"""
from typing import Optional


class M3GPError(Exception):
    """Base class for every error raised on purpose by this package."""


class UsageError(M3GPError):
    """Invalid command-line or experiment-spec input."""


class DataError(M3GPError, ValueError):
    """Input data that cannot be used: bad files, shapes, labels or quotas."""


class EvaluationError(DataError):
    """An expression referenced a feature the data does not have."""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class ExpressionSyntaxError(DataError):
    """Expression text that does not follow the infix grammar."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class FitError(DataError):
    """The Mahalanobis classifier could not be fitted."""
