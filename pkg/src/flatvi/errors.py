"""Exception hierarchy shared across the package."""


class FlatVIError(Exception):
    """Base class for all package errors."""


class ShapeError(FlatVIError, ValueError):
    pass


class TapeError(FlatVIError, RuntimeError):
    """A tape no longer matches the network it was recorded on."""


class DomainError(FlatVIError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class NumericError(FlatVIError, ArithmeticError):
    """Non-finite intermediate or diverged computation."""


class ConfigError(FlatVIError, ValueError):
    pass


class DataValidationError(FlatVIError, ValueError):
    pass
