"""Input validation and conversion helpers shared by the estimator and CLI."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def set_num_threads(n: int | None):
    """Cap BLAS/OpenMP thread pools; n=1 gives the deterministic mode."""
    if n is None:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def as_chw_float(image: np.ndarray) -> np.ndarray:
    """Accept (h, w, 3) uint8 or float and return (3, h, w) float32 in
    [-1, 1]; uint8 is rescaled, float is range-checked."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected an (h, w, 3) image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32).transpose(2, 0, 1) / np.float32(127.5) - 1.0
    arr = arr.astype(np.float32, copy=False)
    finite = arr[np.isfinite(arr)]
    if finite.size and np.abs(finite).max() > 1.0 + 1e-5:
        raise ShapeError("float images must be scaled to [-1, 1]")
    return arr.transpose(2, 0, 1).astype(np.float32)


def as_image_batch(X) -> np.ndarray:
    """Normalise a batch (n, h, w, 3) or list of (h, w, 3) images to a
    stacked (n, 3, h, w) float32 array."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        items = list(X)
    elif isinstance(X, (list, tuple)):
        items = list(X)
    else:
        raise ShapeError(
            "expected an (n, h, w, 3) array or a list of (h, w, 3) images"
        )
    if not items:
        raise ShapeError("empty image batch")
    chw = [as_chw_float(im) for im in items]
    shapes = {im.shape for im in chw}
    if len(shapes) != 1:
        raise ShapeError(f"images have mixed shapes: {sorted(shapes)}")
    return np.stack(chw)


def split_nan_holes(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split an (h, w, 3) float image with NaN-marked holes into a clean
    image (NaNs zeroed) and a binary (h, w) hole mask."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected an (h, w, 3) image, got shape {arr.shape}")
    mask = np.isnan(arr).any(axis=2).astype(np.float32)
    clean = np.nan_to_num(arr, nan=0.0)
    return clean, mask


def reflect_pad_to_multiple(
    img: np.ndarray, base: int
) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the last two axes up to the next multiples of ``base``;
    returns the padded array and the original (h, w) for cropping back."""
    h, w = img.shape[-2:]
    ph = (-h) % base
    pw = (-w) % base
    if h + ph < base:
        ph = base - h
    if w + pw < base:
        pw = base - w
    out = img
    while ph > 0 or pw > 0:
        # numpy reflect padding is limited to size-1 per round
        step_h = min(ph, out.shape[-2] - 1)
        step_w = min(pw, out.shape[-1] - 1)
        if ph > 0 and step_h == 0 or pw > 0 and step_w == 0:
            raise ShapeError("image too small to reflect-pad")
        pad = [(0, 0)] * (out.ndim - 2) + [(0, step_h), (0, step_w)]
        out = np.pad(out, pad, mode="reflect")
        ph -= step_h
        pw -= step_w
    return out, (h, w)


def zero_pad_to_multiple(mask: np.ndarray, base: int) -> np.ndarray:
    """Pad a 2-D mask with zeros (padded area counts as valid context)."""
    h, w = mask.shape
    ph = (-h) % base
    pw = (-w) % base
    if h + ph < base:
        ph = base - h
    if w + pw < base:
        pw = base - w
    return np.pad(mask, ((0, ph), (0, pw)))
