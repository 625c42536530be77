"""Exception types shared across the package."""


class MclError(Exception):
    """Base class for all package errors."""


class NonFiniteError(MclError, ArithmeticError):
    """A NaN or Inf showed up where finite values are required."""


class ShapeError(MclError, ValueError):
    pass


class ConfigError(MclError, ValueError):
    """Invalid configuration value or combination of values."""


class StructureError(MclError, ValueError):
    """Parameter collections or sequences that should line up do not."""


class InputError(MclError, ValueError):
    pass


class UsageError(MclError, RuntimeError):
    pass


class FormatError(MclError, ValueError):
    """Malformed or truncated binary/text file."""
