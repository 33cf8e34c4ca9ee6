"""Exception hierarchy shared by every module."""


class MimeaError(Exception):
    """Base class for all package errors."""


class ShapeError(MimeaError, ValueError):
    pass


class DomainError(MimeaError, ValueError):
    pass


class ConfigError(MimeaError, ValueError):
    pass


class DataError(MimeaError):
    """Malformed or inconsistent input files."""


class NumericError(MimeaError, ArithmeticError):
    """Training produced a non-finite value."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}
