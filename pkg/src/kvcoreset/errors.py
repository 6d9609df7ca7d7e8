"""Exception hierarchy shared across the package."""


class KvError(Exception):
    """Base class for all package errors."""


class ValidationError(KvError, ValueError):
    """Input fails a documented precondition or invariant."""


class ShapeError(ValidationError):
    """Array dimensions do not match the expected layout."""


class EmptyInputError(ValidationError):
    """An operation that requires data received none."""


class BoundsError(KvError, IndexError):
    """Index outside the valid range."""


class BudgetError(ValidationError):
    """Requested selection size is not satisfiable."""


class ConfigurationError(ValidationError):
    """Configuration values are internally inconsistent."""


class FormatError(KvError):
    """A serialized cache file violates the container format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
