"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies.
"""


class CrafillError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CrafillError):
    """A tensor, image or mask has dimensions the operation cannot accept."""


class NumericError(CrafillError):
    """An operation produced NaN or Inf, or a graph is numerically invalid."""


class ArchError(CrafillError):
    """An architecture string is malformed or inconsistent."""


class WeightsError(CrafillError):
    """A weight container is corrupt, truncated or does not match the network."""


class MaskError(CrafillError):
    """A mask is invalid or a mask specification cannot be satisfied."""


class TrainingError(CrafillError):
    """The training loop hit a fatal condition (empty dataset, divergence)."""
