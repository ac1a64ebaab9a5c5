"""Exception types raised across the package."""


class GIFLError(Exception):
    """Base class for all package errors."""


class ShapeError(GIFLError, ValueError):
    """Array or tensor dimensions are incompatible."""


class FormatError(GIFLError, ValueError):
    """A file decoded but its content is unusable (e.g. zero-sized image)."""


class ConfigError(GIFLError, ValueError):
    """Invalid or inconsistent configuration."""


class NumericError(GIFLError, ArithmeticError):
    """Non-finite values encountered where finite ones are required."""


class VersionError(GIFLError):
    """Checkpoint and configuration do not belong together."""
