"""Region-enhanced feature learning for point cloud semantic segmentation.

A small numpy implementation: a toy point backbone, semantic-spatial region
extraction, region attention with a contextual relative position bias, the
usual segmentation metrics and a synthetic indoor scene generator.
"""

from .errors import (
    ConfigError,
    CountError,
    DimensionError,
    FileFormatError,
    LabelError,
    NumericError,
    ReflError,
    StateError,
)
from .pipeline import RunConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CountError",
    "DimensionError",
    "FileFormatError",
    "LabelError",
    "NumericError",
    "ReflError",
    "RunConfig",
    "StateError",
]
