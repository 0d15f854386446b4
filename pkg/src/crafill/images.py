"""PNG input/output and the 8-bit <-> [-1, 1] value mapping.

Images are RGB PNGs handled as (3, h, w) float32 arrays with values
v/127.5 - 1; masks are single-channel PNGs where any nonzero pixel marks
the hole.  Writing inverts the mapping with round-half-away-from-zero.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeError


def from_uint8(rgb: np.ndarray) -> np.ndarray:
    """(h, w, 3) uint8 -> (3, h, w) float32 in [-1, 1]."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"expected (h, w, 3) uint8 image, got {rgb.shape}")
    chw = rgb.astype(np.float32).transpose(2, 0, 1)
    return chw / np.float32(127.5) - np.float32(1.0)


def to_uint8(chw: np.ndarray) -> np.ndarray:
    """(3, h, w) float in [-1, 1] -> (h, w, 3) uint8, rounding half away
    from zero."""
    if chw.ndim != 3 or chw.shape[0] != 3:
        raise ShapeError(f"expected (3, h, w) image, got {chw.shape}")
    v = (chw.astype(np.float64) + 1.0) * 127.5
    v = np.floor(v + 0.5)  # values are non-negative here
    return np.clip(v, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"))
    return from_uint8(rgb)


def save_image(path, chw: np.ndarray) -> None:
    Image.fromarray(to_uint8(chw), mode="RGB").save(Path(path), format="PNG")


def load_mask(path) -> np.ndarray:
    """Single-channel PNG -> (h, w) float32 of 0/1 (nonzero = hole)."""
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"))
    return (gray > 0).astype(np.float32)


def save_mask(path, mask: np.ndarray) -> None:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got {arr.shape}")
    Image.fromarray(((arr > 0) * np.uint8(255)), mode="L").save(
        Path(path), format="PNG"
    )
