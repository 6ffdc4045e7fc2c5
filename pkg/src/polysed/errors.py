"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage/config problems exit 1,
data problems exit 2, numeric failures exit 3.
"""


class PolysedError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PolysedError):
    """Invalid experiment configuration or command usage."""


class DataError(PolysedError):
    """Malformed or inconsistent input data (files, shapes, labels)."""


class ShapeError(DataError):
    """Array dimensions do not conform to an operation's rule."""


class NumericError(PolysedError):
    """A computation produced non-finite values (NaN/Inf)."""
