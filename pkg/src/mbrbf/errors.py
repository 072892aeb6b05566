"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration and data problems exit
with 1, numerical divergence during training exits with 2.
"""


class MBRBFError(Exception):
    """Base class for all library errors."""


class ShapeError(MBRBFError):
    """An array argument has the wrong shape or dimensionality."""


class FormatError(MBRBFError):
    """A file does not conform to its binary or text format."""


class ConfigError(MBRBFError):
    """A configuration value is missing, unknown, or invalid."""


class ValidationError(MBRBFError):
    """Dataset records failed validation; the message lists offending rows."""


class EmptySplitError(MBRBFError):
    """An operation was asked to iterate or evaluate an empty split."""


class DivergenceError(MBRBFError):
    """Training or a parameter update produced non-finite numbers."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
