"""Range-image LiDAR segmentation with a learnable KPConv refinement layer."""

from kprnet.errors import ConfigError, DataError, FormatError, KprnetError, StateError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "FormatError",
    "KprnetError",
    "StateError",
]
