"""crafill: high-resolution image inpainting via contextual residual aggregation.

A small learned generator inpaints a fixed low resolution; high-frequency
detail for the hole is synthesised by attention-weighted aggregation of
residuals from the surrounding context, so arbitrarily large images cost
the network the same amount of work.
"""

from .engine import Graph, Tensor, counters
from .errors import (
    ArchError,
    CrafillError,
    MaskError,
    NumericError,
    ShapeError,
    TrainingError,
    WeightsError,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Graph",
    "counters",
    "CrafillError",
    "ShapeError",
    "NumericError",
    "ArchError",
    "WeightsError",
    "MaskError",
    "TrainingError",
    "CRAInpainter",
    "__version__",
]


def __getattr__(name):
    # heavier modules (sklearn import) load lazily
    if name == "CRAInpainter":
        from .estimator import CRAInpainter

        return CRAInpainter
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
