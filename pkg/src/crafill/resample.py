"""Image down/up-sampling and the high-frequency residual decomposition.

All functions operate on the last two axes of a numpy array, so they work
for (h, w), (c, h, w) and (b, c, h, w) alike, and they preserve the input
float dtype.  Interpolating resizers use the half-pixel-center convention
(source position of output pixel i is (i + 0.5) * scale - 0.5) with
clamp-to-edge sampling, applied separably via explicit float64 weight
matrices.  The bicubic kernel is Catmull-Rom (a = -0.5).

The residual decomposition splits an image into a low-frequency part
(down-then-up-sampled copy of itself) and the high-frequency remainder.
``contextual_residual`` rounds the stored residual so that adding it back
to the blurry image reproduces the raw input bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import counters
from .errors import ShapeError

DOWN_METHODS = ("averaging", "nearest", "bilinear", "bicubic")
UP_METHODS = ("nearest", "bilinear", "bicubic")


@dataclass(frozen=True)
class MethodPair:
    """Down/up-sampler choice for one pipeline run.

    A single ``up`` field covers both up-sampling stages (network output
    and blur), which keeps them consistent by construction.
    """

    down: str = "averaging"
    up: str = "bilinear"

    def __post_init__(self):
        if self.down not in DOWN_METHODS:
            raise ShapeError(f"unknown down-sampling method {self.down!r}")
        if self.up not in UP_METHODS:
            raise ShapeError(f"unknown up-sampling method {self.up!r}")


DEFAULT_PAIR = MethodPair()


def _factors(factor) -> tuple[int, int]:
    if isinstance(factor, tuple):
        fh, fw = factor
    else:
        fh = fw = factor
    if not (isinstance(fh, int) and isinstance(fw, int)) or fh < 1 or fw < 1:
        raise ShapeError(f"resample factor must be positive ints, got {factor!r}")
    return fh, fw


def _cubic_weight(t: float) -> float:
    # Catmull-Rom spline, a = -0.5
    t = abs(t)
    if t <= 1.0:
        return 1.5 * t**3 - 2.5 * t**2 + 1.0
    if t < 2.0:
        return -0.5 * t**3 + 2.5 * t**2 - 4.0 * t + 2.0
    return 0.0


def resize_matrix(n_in: int, n_out: int, method: str) -> np.ndarray:
    """(n_out, n_in) float64 row-stochastic interpolation matrix."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        if method == "nearest":
            m[i, min(n_in - 1, max(0, int(np.floor(src + 0.5))))] = 1.0
            continue
        i0 = int(np.floor(src))
        t = src - i0
        if method == "bilinear":
            taps = ((i0, 1.0 - t), (i0 + 1, t))
        elif method == "bicubic":
            taps = (
                (i0 - 1, _cubic_weight(1.0 + t)),
                (i0, _cubic_weight(t)),
                (i0 + 1, _cubic_weight(1.0 - t)),
                (i0 + 2, _cubic_weight(2.0 - t)),
            )
        else:
            raise ShapeError(f"unknown interpolation method {method!r}")
        for j, w in taps:
            m[i, min(n_in - 1, max(0, j))] += w  # clamp-to-edge
        s = m[i].sum()
        if s != 1.0:  # non-dyadic offsets only; keeps rows stochastic
            m[i] /= s
    return m


def _apply_matrices(img: np.ndarray, rh: np.ndarray, rw: np.ndarray) -> np.ndarray:
    out = np.matmul(np.matmul(rh, img.astype(np.float64)), rw.T)
    return out.astype(img.dtype)


_TAPS = {"nearest": 1, "bilinear": 2, "bicubic": 4}


def downsample(img: np.ndarray, factor, method: str = "averaging") -> np.ndarray:
    """Shrink by integer factors.  Averaging computes exact block means
    with 64-bit accumulation; the other methods point-sample."""
    fh, fw = _factors(factor)
    h, w = img.shape[-2:]
    if h % fh or w % fw:
        raise ShapeError(f"image size {(h, w)} not divisible by factor {(fh, fw)}")
    ho, wo = h // fh, w // fw
    if method == "averaging":
        counters.resample_taps += img.size // (fh * fw) * fh * fw
        blocks = img.reshape(*img.shape[:-2], ho, fh, wo, fw)
        means = blocks.mean(axis=(-3, -1), dtype=np.float64)
        return means.astype(img.dtype)
    if method == "nearest":
        counters.resample_taps += img.size // (fh * fw)
        return img[..., fh // 2 :: fh, fw // 2 :: fw].copy()
    if method in ("bilinear", "bicubic"):
        counters.resample_taps += img.size // (fh * fw) * _TAPS[method] ** 2
        return _apply_matrices(
            img, resize_matrix(h, ho, method), resize_matrix(w, wo, method)
        )
    raise ShapeError(f"unknown down-sampling method {method!r}")


def upsample(img: np.ndarray, factor, method: str = "bilinear") -> np.ndarray:
    """Enlarge by integer factors."""
    fh, fw = _factors(factor)
    h, w = img.shape[-2:]
    if fh == 1 and fw == 1:
        return img.copy()
    if method == "nearest":
        counters.resample_taps += img.size * fh * fw
        return np.repeat(np.repeat(img, fh, axis=-2), fw, axis=-1)
    if method in ("bilinear", "bicubic"):
        counters.resample_taps += img.size * fh * fw * _TAPS[method] ** 2
        return _apply_matrices(
            img, resize_matrix(h, h * fh, method), resize_matrix(w, w * fw, method)
        )
    raise ShapeError(f"unknown up-sampling method {method!r}")


def resize_to(img: np.ndarray, h_out: int, w_out: int, method: str = "bilinear") -> np.ndarray:
    """Resize to an arbitrary target size (used for dataset preparation)."""
    h, w = img.shape[-2:]
    if (h, w) == (h_out, w_out):
        return img.copy()
    return _apply_matrices(
        img, resize_matrix(h, h_out, method), resize_matrix(w, w_out, method)
    )


def contextual_residual(
    raw: np.ndarray, factor, pair: MethodPair = DEFAULT_PAIR
) -> np.ndarray:
    """High-frequency component: raw minus its down-then-up-sampled self.

    Returned at float64 accumulator precision so that
    ``residual + blurry == raw`` holds bit for bit: the subtraction of two
    float32 values is exact in float64 (a float32 residual cannot make the
    round trip exact, its grid near large residual magnitudes is coarser
    than the target's).  The rare deep-cancellation pixels where even the
    64-bit difference rounds are nudged by ulps until they reconstruct.
    """
    fh, fw = _factors(factor)
    h, w = raw.shape[-2:]
    if h % fh or w % fw:
        raise ShapeError(f"image size {(h, w)} not divisible by factor {(fh, fw)}")
    blur = upsample(downsample(raw, (fh, fw), pair.down), (fh, fw), pair.up)
    raw64 = raw.astype(np.float64)
    blur64 = blur.astype(np.float64)
    res = raw64 - blur64
    for _ in range(4):
        bad = (res + blur64) != raw64
        if not bad.any():
            break
        toward = np.where(res + blur64 < raw64, np.inf, -np.inf)
        res = np.where(bad, np.nextafter(res, toward), res)
    return res
