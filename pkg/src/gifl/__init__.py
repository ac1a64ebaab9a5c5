"""Generalizable image forgery localization by authentic-feature reconstruction."""

from gifl.errors import ConfigError, FormatError, GIFLError, NumericError, ShapeError, VersionError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FormatError",
    "GIFLError",
    "NumericError",
    "ShapeError",
    "VersionError",
    "__version__",
]
