"""Exception hierarchy. CLI exit codes are keyed off these classes."""


class ImbError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(ImbError, ValueError):
    exit_code = 1


class ShapeError(ImbError, ValueError):
    exit_code = 1


class DegenerateMaskError(ImbError, ValueError):
    """Raised when a mask leaves no position to attend to or average over."""

    exit_code = 3


class DataError(ImbError, ValueError):
    exit_code = 2


class ParseError(DataError):
    pass


class NumericError(ImbError, ArithmeticError):
    exit_code = 3


class CheckpointError(ImbError):
    exit_code = 2


class TemplateError(ImbError, ValueError):
    exit_code = 1


class TransportError(ImbError):
    """Re-rank backend could not be reached (after retries)."""

    exit_code = 2
