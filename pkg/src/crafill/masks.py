"""Random hole masks for training: free-form brush strokes and object
shape templates, both capped at a maximum hole area fraction.

Masks are float32 arrays of 0/1 with 1 marking the hole.  Generation is
fully driven by the caller's numpy Generator, so a fixed seed reproduces
a mask bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .errors import MaskError

REFERENCE_SIZE = 512  # brush geometry below is expressed at this size


@dataclass
class MaskSpec:
    mode: str = "brush"  # 'brush', 'template' or 'mixed'
    max_area_fraction: float = 0.25
    strokes: tuple[int, int] = (1, 8)
    vertices: tuple[int, int] = (4, 12)
    width_range: tuple[float, float] = (5.0, 30.0)
    length_range: tuple[float, float] = (16.0, 80.0)
    angle_jitter_deg: float = 60.0
    templates: tuple = ()
    rotation_range: tuple[float, float] = (0.0, 360.0)
    scale_range: tuple[float, float] = (0.5, 1.5)
    flip: bool = True

    def __post_init__(self):
        if self.mode not in ("brush", "template", "mixed"):
            raise MaskError(f"unknown mask mode {self.mode!r}")
        if not 0.0 < self.max_area_fraction <= 1.0:
            raise MaskError("max_area_fraction must be in (0, 1]")


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _brush_mask(h: int, w: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    scale = min(h, w) / REFERENCE_SIZE
    cap = int(spec.max_area_fraction * h * w)
    w_lo, w_hi = spec.width_range
    min_dot = math.pi * (max(1.0, w_lo * scale) / 2.0) ** 2
    if min_dot > cap:
        raise MaskError(
            f"area cap {spec.max_area_fraction} cannot fit even a minimal stroke"
        )
    canvas = np.zeros((h, w), np.uint8)
    n_strokes = int(rng.integers(spec.strokes[0], spec.strokes[1] + 1))
    for _ in range(n_strokes):
        stroke = np.zeros((h, w), np.uint8)
        n_vert = int(rng.integers(spec.vertices[0], spec.vertices[1] + 1))
        y = int(rng.integers(h))
        x = int(rng.integers(w))
        angle = rng.uniform(0.0, 2.0 * math.pi)
        width = max(1, int(round(rng.uniform(w_lo, w_hi) * scale)))
        jitter = math.radians(spec.angle_jitter_deg)
        for _ in range(n_vert):
            angle += rng.uniform(-jitter, jitter)
            length = rng.uniform(*spec.length_range) * scale
            ny = int(np.clip(y + length * math.sin(angle), 0, h - 1))
            nx = int(np.clip(x + length * math.cos(angle), 0, w - 1))
            cv2.line(stroke, (x, y), (nx, ny), 1, width)
            cv2.circle(stroke, (nx, ny), width // 2, 1, -1)
            y, x = ny, nx
        union = canvas | stroke
        if int(union.sum()) > cap:
            break  # keep what fits, drop the rest of the strokes
        canvas = union
    if canvas.sum() == 0:
        # the first stroke alone exceeded the cap: place a shrinking dot
        for attempt in range(3):
            radius = max(1, int(w_lo * scale / 2) >> attempt)
            dot = np.zeros((h, w), np.uint8)
            cy = int(rng.integers(radius, h - radius))
            cx = int(rng.integers(radius, w - radius))
            cv2.circle(dot, (cx, cy), radius, 1, -1)
            if int(dot.sum()) <= cap:
                canvas = dot
                break
        else:
            raise MaskError("could not place any hole under the area cap")
    return canvas.astype(np.float32)


def _warp_template(tpl: np.ndarray, h: int, w: int, angle: float, scale: float) -> np.ndarray:
    if tpl.shape != (h, w):
        tpl = cv2.resize(tpl, (w, h), interpolation=cv2.INTER_NEAREST)
    if angle == 0.0 and scale == 1.0:
        return tpl.copy()
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, scale)
    return cv2.warpAffine(tpl, m, (w, h), flags=cv2.INTER_NEAREST, borderValue=0)


def _template_mask(h: int, w: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    if not len(spec.templates):
        raise MaskError("template mode requires at least one template mask")
    tpl = np.asarray(spec.templates[int(rng.integers(len(spec.templates)))])
    tpl = (tpl > 0).astype(np.uint8)
    angle = float(rng.uniform(*spec.rotation_range))
    scale = float(rng.uniform(*spec.scale_range))
    if spec.flip:
        if rng.random() < 0.5:
            tpl = tpl[:, ::-1]
        if rng.random() < 0.5:
            tpl = tpl[::-1, :]
    cap = int(spec.max_area_fraction * h * w)
    warped = _warp_template(tpl, h, w, angle, scale)
    for _ in range(12):
        if int(warped.sum()) <= cap:
            return warped.astype(np.float32)
        scale *= 0.8
        warped = _warp_template(tpl, h, w, angle, scale)
    raise MaskError("template does not fit under the area cap at any scale")


def generate_mask(h: int, w: int, spec: MaskSpec | None = None, rng=None) -> np.ndarray:
    """Draw one random binary hole mask of shape (h, w)."""
    if h < 64 or w < 64:
        raise MaskError(f"mask size must be at least 64x64, got {(h, w)}")
    spec = spec or MaskSpec()
    rng = _as_rng(rng)
    mode = spec.mode
    if mode == "mixed":
        mode = "brush" if rng.random() < 0.5 else "template"
    if mode == "brush":
        return _brush_mask(h, w, spec, rng)
    return _template_mask(h, w, spec, rng)
