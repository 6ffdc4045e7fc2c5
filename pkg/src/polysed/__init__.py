"""Polyphonic sound event detection: multi-scale time-frequency features,
capsule-network detectors, and self-adaptive late fusion."""

from .errors import ConfigError, DataError, NumericError, PolysedError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "NumericError",
    "PolysedError",
    "ShapeError",
    "__version__",
]
