"""Exception hierarchy shared by all reflnet modules."""


class ReflError(Exception):
    """Base class for every error raised by the package."""


class DimensionError(ReflError, ValueError):
    pass


class LabelError(ReflError, ValueError):
    pass


class CountError(ReflError, ValueError):
    pass


class ConfigError(ReflError, ValueError):
    pass


class StateError(ReflError, RuntimeError):
    pass


class NumericError(ReflError, ArithmeticError):
    pass


class FileFormatError(ReflError, OSError):
    """Malformed or unreadable artifact file (maps to the I/O exit code)."""
