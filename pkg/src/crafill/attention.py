"""Patch attention: score computation, attention transfer, residual aggregation.

A binary hole mask at the generator's working resolution is reduced to a
square grid of cells (any overlap with the hole marks a cell as hole).
Similarity scores between context and hole cells are computed once, from
3x3 patches of a high-level feature map, as cosine similarities followed
by a softmax over the context cells of each hole column.  The same score
matrix is then reused to fill hole patches at several feature scales and,
at image scale, to synthesise the high-frequency residuals of the hole.

Score matrices are stored dense (n_cells x n_cells) with zeros on hole
rows and on context columns; only the context-row/hole-column block
carries information.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import counters
from .errors import MaskError, ShapeError

DEFAULT_GRID = 32
ACM_PATCH = 3  # patch side used for the similarity features


class _Stats:
    """Call counters used by the score-sharing tests."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.score_computations = 0


stats = _Stats()


# ---------------------------------------------------------------------------
# cell partition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellPartition:
    """Hole/context split of the attention grid.  ``hole`` is (g, g) bool,
    True marking cells that overlap the hole."""

    hole: np.ndarray

    @property
    def grid(self) -> int:
        return self.hole.shape[0]

    @property
    def n_cells(self) -> int:
        return self.hole.size

    @property
    def n_hole(self) -> int:
        return int(self.hole.sum())

    @property
    def n_context(self) -> int:
        return self.n_cells - self.n_hole

    @property
    def hole_idx(self) -> np.ndarray:
        return np.flatnonzero(self.hole.reshape(-1))

    @property
    def context_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.hole.reshape(-1))


def as_mask2d(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    m = m.reshape(m.shape[-2:]) if m.ndim > 2 else m
    if m.ndim != 2:
        raise ShapeError(f"mask must be 2-D (got shape {np.asarray(mask).shape})")
    vals = np.unique(m)
    if not np.isin(vals, (0, 1)).all():
        raise MaskError(f"mask must be binary 0/1, found values {vals[:8]}")
    return m.astype(np.float32)


def partition_cells(mask: np.ndarray, grid: int = DEFAULT_GRID) -> CellPartition:
    """Classify grid cells: a cell is hole iff any of its pixels is hole."""
    m = as_mask2d(mask)
    h, w = m.shape
    if h % grid or w % grid:
        raise ShapeError(f"mask size {(h, w)} not divisible by grid {grid}")
    cells = m.reshape(grid, h // grid, grid, w // grid).mean(
        axis=(1, 3), dtype=np.float64
    )
    hole = cells > 0
    if hole.all():
        raise MaskError("mask covers every cell; no context to attend to")
    return CellPartition(hole=hole)


# ---------------------------------------------------------------------------
# patch extraction / folding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchGrid:
    """Sliding-window layout over a (c, h, w) map."""

    map_size: tuple[int, int]
    patch: tuple[int, int]
    stride: tuple[int, int]
    padding: str = "valid"  # 'valid' or 'same'

    def __post_init__(self):
        if self.padding not in ("valid", "same"):
            raise ShapeError(f"padding must be 'valid' or 'same', got {self.padding!r}")
        for ps, st, ms in zip(self.patch, self.stride, self.map_size):
            if ps < 1 or st < 1:
                raise ShapeError("patch and stride must be >= 1")
            if self.padding == "valid" and (ms - ps) % st:
                raise ShapeError(
                    f"grid {self} does not tile the map without remainder"
                )

    def positions(self, axis: int) -> np.ndarray:
        ms, ps, st = self.map_size[axis], self.patch[axis], self.stride[axis]
        if self.padding == "valid":
            return np.arange(0, ms - ps + 1, st)
        n_out = -(-ms // st)
        pad = max((n_out - 1) * st + ps - ms, 0)
        return np.arange(n_out) * st - pad // 2

    @property
    def grid_shape(self) -> tuple[int, int]:
        return len(self.positions(0)), len(self.positions(1))

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid_shape
        return gh * gw


def extract_patches(arr: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Stack of patches (n, c, ph, pw), row-major over window positions;
    'same' windows are zero-filled outside the map."""
    c, h, w = arr.shape
    if (h, w) != grid.map_size:
        raise ShapeError(f"map {arr.shape} does not match grid {grid.map_size}")
    ph, pw = grid.patch
    ys, xs = grid.positions(0), grid.positions(1)
    if grid.padding == "same":
        pad_t = max(0, -int(ys[0]))
        pad_l = max(0, -int(xs[0]))
        pad_b = max(0, int(ys[-1]) + ph - h)
        pad_r = max(0, int(xs[-1]) + pw - w)
        arr = np.pad(arr, ((0, 0), (pad_t, pad_b), (pad_l, pad_r)))
        ys = ys + pad_t
        xs = xs + pad_l
    out = np.empty((len(ys) * len(xs), c, ph, pw), dtype=arr.dtype)
    i = 0
    for y in ys:
        for x in xs:
            out[i] = arr[:, y : y + ph, x : x + pw]
            i += 1
    return out


def fold_patches(stack: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Inverse of extract_patches; overlapping contributions are averaged.
    For non-overlapping grids the fold reproduces the map bit-exactly."""
    n, c, ph, pw = stack.shape
    if n != grid.n_patches or (ph, pw) != grid.patch:
        raise ShapeError(f"stack {stack.shape} does not match grid {grid}")
    h, w = grid.map_size
    ys, xs = grid.positions(0), grid.positions(1)
    pad_t = max(0, -int(ys[0])) if grid.padding == "same" else 0
    pad_l = max(0, -int(xs[0])) if grid.padding == "same" else 0
    pad_b = max(0, int(ys[-1]) + ph - h) if grid.padding == "same" else 0
    pad_r = max(0, int(xs[-1]) + pw - w) if grid.padding == "same" else 0
    acc = np.zeros((c, h + pad_t + pad_b, w + pad_l + pad_r), dtype=np.float64)
    cnt = np.zeros(acc.shape[1:], dtype=np.float64)
    i = 0
    for y in ys + pad_t:
        for x in xs + pad_l:
            acc[:, y : y + ph, x : x + pw] += stack[i]
            cnt[y : y + ph, x : x + pw] += 1.0
            i += 1
    acc = acc[:, pad_t : pad_t + h, pad_l : pad_l + w]
    cnt = cnt[pad_t : pad_t + h, pad_l : pad_l + w]
    return (acc / cnt).astype(stack.dtype)


# ---------------------------------------------------------------------------
# score computation
# ---------------------------------------------------------------------------


@dataclass
class AttentionScores:
    """Dense (n_cells, n_cells) float32 score matrix plus the partition it
    was computed under.  Column j (a hole cell) holds the softmax weights
    over context rows; everything else is zero."""

    matrix: np.ndarray
    partition: CellPartition

    @property
    def grid(self) -> int:
        return self.partition.grid

    @property
    def n_cells(self) -> int:
        return self.partition.n_cells


def compute_scores(p_map: np.ndarray, partition: CellPartition) -> AttentionScores:
    """Cosine-similarity scores between context and hole cells.

    ``p_map`` is the (c, g, g) high-level feature map.  Each cell is
    described by its 3x3 stride-1 zero-padded patch vector; similarities
    are cosines with an epsilon-guarded norm, turned into weights by a
    softmax over the context cells of every hole column.
    """
    if p_map.ndim != 3:
        raise ShapeError(f"feature map must be (c, g, g), got {p_map.shape}")
    g = partition.grid
    if p_map.shape[1:] != (g, g):
        raise ShapeError(
            f"feature map spatial size {p_map.shape[1:]} does not match grid {g}"
        )
    if partition.n_context < 1:
        raise MaskError("attention needs at least one context cell")
    stats.score_computations += 1
    grid = PatchGrid((g, g), (ACM_PATCH, ACM_PATCH), (1, 1), "same")
    vecs = extract_patches(p_map, grid).reshape(g * g, -1).astype(np.float64)
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    unit = vecs / (norms + 1e-8)  # all-zero patches get zero similarity
    ctx = partition.context_idx
    hol = partition.hole_idx
    n = g * g
    matrix = np.zeros((n, n), dtype=np.float32)
    if hol.size:
        sim = unit[ctx] @ unit[hol].T  # (n_ctx, n_hole) cosines
        sim -= sim.max(axis=0, keepdims=True)
        e = np.exp(sim)
        weights = e / e.sum(axis=0, keepdims=True)
        matrix[np.ix_(ctx, hol)] = weights.astype(np.float32)
    return AttentionScores(matrix=matrix, partition=partition)


# ---------------------------------------------------------------------------
# transfer and aggregation
# ---------------------------------------------------------------------------


def transfer_matrix(scores: AttentionScores, keep_context: bool) -> np.ndarray:
    """(n, n) float64 mixing matrix: output patch q = sum_p m[q, p] patch p.

    Hole rows carry the attention weights; context rows are identity
    (feature transfer) or zero (residual aggregation)."""
    part = scores.partition
    m = scores.matrix.T.astype(np.float64).copy()  # rows: outputs
    ctx = part.context_idx
    m[ctx, :] = 0.0
    if keep_context:
        m[ctx, ctx] = 1.0
    return m


def _split_patches(arr: np.ndarray, g: int) -> tuple[np.ndarray, int, int]:
    c, h, w = arr.shape
    if h % g or w % g:
        raise ShapeError(f"map size {(h, w)} not divisible by grid {g}")
    kh, kw = h // g, w // g
    u = arr.reshape(c, g, kh, g, kw).transpose(1, 3, 0, 2, 4).reshape(g * g, -1)
    return u, kh, kw


def _join_patches(u: np.ndarray, c: int, g: int, kh: int, kw: int) -> np.ndarray:
    return (
        u.reshape(g, g, c, kh, kw).transpose(2, 0, 3, 1, 4).reshape(c, g * kh, g * kw)
    )


def attention_transfer(
    p_l: np.ndarray, scores: AttentionScores, level_patch: int
) -> np.ndarray:
    """Fill hole patches of a feature map with score-weighted sums of its
    context patches.  Patches are non-overlapping (stride == patch size);
    context patches pass through untouched."""
    g = scores.grid
    c, h, w = p_l.shape
    if (h, w) != (g * level_patch, g * level_patch):
        raise ShapeError(
            f"feature map {p_l.shape} does not match grid {g} x patch {level_patch}"
        )
    u, kh, kw = _split_patches(p_l, g)
    part = scores.partition
    ctx, hol = part.context_idx, part.hole_idx
    out = u.copy()
    if hol.size:
        weights = scores.matrix[np.ix_(ctx, hol)].astype(np.float64)
        filled = weights.T @ u[ctx].astype(np.float64)
        counters.aggregation_macs += weights.size * u.shape[1]
        out[hol] = filled.astype(p_l.dtype)
    return _join_patches(out, c, g, kh, kw)


def aggregate_residuals(residual: np.ndarray, scores: AttentionScores) -> np.ndarray:
    """Score-weighted aggregation of context residual patches into the hole.

    Patches tile the residual exactly ((h/g, w/g) each, no overlap).  The
    returned aggregate is zero outside the hole; callers add it to the
    up-sampled network output and paste the raw image back over context.
    """
    if residual.ndim != 3:
        raise ShapeError(f"residual must be (c, h, w), got {residual.shape}")
    g = scores.grid
    u, kh, kw = _split_patches(residual, g)
    part = scores.partition
    ctx, hol = part.context_idx, part.hole_idx
    out = np.zeros_like(u, dtype=np.float64)
    if hol.size:
        weights = scores.matrix[np.ix_(ctx, hol)].astype(np.float64)
        out[hol] = weights.T @ u[ctx].astype(np.float64)
        counters.aggregation_macs += weights.size * u.shape[1]
    c = residual.shape[0]
    return _join_patches(out, c, g, kh, kw).astype(residual.dtype)


# ---------------------------------------------------------------------------
# debug dump
# ---------------------------------------------------------------------------


def dump_scores(scores: AttentionScores, path) -> None:
    """Write the matrix as flat row-major float32 plus a text header
    side-car (<path>.hdr) for inspection tooling."""
    path = Path(path)
    scores.matrix.astype("<f4").tofile(path)
    part = scores.partition
    header = (
        f"rows {scores.n_cells}\n"
        f"cols {scores.n_cells}\n"
        f"dtype f32le\n"
        f"layout row-major\n"
        f"grid {scores.grid}\n"
        f"n_context {part.n_context}\n"
        f"n_hole {part.n_hole}\n"
    )
    path.with_name(path.name + ".hdr").write_text(header)


def load_scores_dump(path) -> np.ndarray:
    path = Path(path)
    header = {}
    for line in path.with_name(path.name + ".hdr").read_text().splitlines():
        k, v = line.split(maxsplit=1)
        header[k] = v
    rows, cols = int(header["rows"]), int(header["cols"])
    return np.fromfile(path, dtype="<f4").reshape(rows, cols)
