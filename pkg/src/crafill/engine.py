"""Reverse-mode autodiff on dense 4-D float32 arrays.

Everything the inpainting networks need lives here: convolution (with
stride, dilation and zero 'same' padding), activations, elementwise
arithmetic with limited broadcasting, channel concat/slice, the resize
primitives used inside the generators, patch mixing for attention
transfer, and reductions.  Values are stored as 32-bit floats; reductions
and convolution inner loops accumulate in 64-bit.

Gradients are computed by :func:`grad`, which walks the implicitly
recorded op graph.  Every adjoint is itself built from engine ops, so
gradients are differentiable again — required for the gradient-penalty
term of the adversarial loss, which differentiates a gradient norm with
respect to network weights.

Any op that produces a NaN or Inf raises :class:`NumericError`; finite
data is an invariant of the tensor type, not a best-effort property.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "Graph",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "power",
    "exp",
    "sigmoid",
    "elu",
    "absolute",
    "clip",
    "elementwise",
    "activation",
    "concat_channels",
    "slice_channels",
    "conv2d",
    "expand_depthwise",
    "avg_downsample",
    "nearest_upsample",
    "matrix_resize",
    "patch_mix",
    "sum_to_shape",
    "broadcast_to",
    "sum_all",
    "mean_all",
    "sum_per_sample",
    "detach",
    "grad",
    "finite_diff_check",
    "counters",
    "precision",
]

# ---------------------------------------------------------------------------
# dtype context
# ---------------------------------------------------------------------------

_state = threading.local()


def _active_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Run enclosed ops at the given float precision.

    Normal operation is float32.  The finite-difference checker evaluates
    the loss under ``precision(np.float64)`` so that the numeric quotient
    is not drowned by single-precision rounding of the loss value.
    """
    prev = _active_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


# ---------------------------------------------------------------------------
# op counters
# ---------------------------------------------------------------------------


class OpCounters:
    """Cumulative work counters, used by the benchmark command and the
    resolution-independence checks."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.conv_macs = 0
        self.attention_macs = 0
        self.resample_taps = 0
        self.aggregation_macs = 0

    def snapshot(self) -> dict:
        return {
            "conv_macs": self.conv_macs,
            "attention_macs": self.attention_macs,
            "resample_taps": self.resample_taps,
            "aggregation_macs": self.aggregation_macs,
        }


counters = OpCounters()


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A dense (batch, channels, height, width) array node in the op graph.

    Tensors are immutable once created (training updates replace the
    underlying buffer of leaf parameters between steps, never during a
    forward pass).
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "vjp", "idx")

    _counter = 0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=_active_dtype())
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (b, c, h, w), got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("tensor initialised with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple = ()
        self.vjp = None
        self.idx = Tensor._next_idx()

    @classmethod
    def _next_idx(cls) -> int:
        cls._counter += 1
        return cls._counter

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; python scalars are promoted to constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Wrap an array as a leaf tensor."""
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    """Wrap an array as a non-trainable leaf tensor."""
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor(np.full((1, 1, 1, 1), x, dtype=_active_dtype()))
    return Tensor(x)


def _node(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    """Create a result node, checking finiteness and wiring the adjoint."""
    if not np.isfinite(data).all():
        raise NumericError(f"op {op!r} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.parents = tuple(parents)
        out.vjp = vjp
    else:
        out.parents = ()
        out.vjp = None
    out.idx = Tensor._next_idx()
    return out


def detach(x: Tensor) -> Tensor:
    """A copy of ``x`` that is a constant for differentiation purposes."""
    return Tensor(x.data.copy())


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------


def _check_broadcast(sa: tuple, sb: tuple, op: str) -> tuple:
    out = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: shapes {sa} and {sb} are not broadcastable")
    return tuple(out)


def sum_to_shape(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` over every axis where ``shape`` has extent 1 (64-bit
    accumulation).  The adjoint of broadcasting."""
    shape = tuple(shape)
    if len(shape) != 4:
        raise ShapeError(f"sum_to_shape target must be 4-D, got {shape}")
    axes = tuple(i for i in range(4) if shape[i] == 1 and x.shape[i] != 1)
    for i in range(4):
        if shape[i] not in (1, x.shape[i]):
            raise ShapeError(f"cannot reduce {x.shape} to {shape}")
    if not axes:
        data = x.data.copy()
    else:
        data = x.data.sum(axis=axes, keepdims=True, dtype=np.float64).astype(
            _active_dtype()
        )

    def vjp(g, need):
        return [broadcast_to(g, x.shape) if need[0] else None]

    return _node("sum_to_shape", data, (x,), vjp)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    """Materialise ``x`` broadcast to ``shape``."""
    shape = tuple(shape)
    for i in range(4):
        if x.shape[i] not in (1, shape[i]):
            raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    data = np.broadcast_to(x.data, shape).copy()

    def vjp(g, need):
        return [sum_to_shape(g, x.shape) if need[0] else None]

    return _node("broadcast_to", data, (x,), vjp)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "add")
    with np.errstate(over="ignore"):
        data = a.data + b.data

    def vjp(g, need):
        ga = sum_to_shape(g, a.shape) if need[0] else None
        gb = sum_to_shape(g, b.shape) if need[1] else None
        return [ga, gb]

    return _node("add", data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g, need):
        return [neg(g) if need[0] else None]

    return _node("neg", -a.data, (a,), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "sub")
    with np.errstate(over="ignore"):
        data = a.data - b.data

    def vjp(g, need):
        ga = sum_to_shape(g, a.shape) if need[0] else None
        gb = sum_to_shape(neg(g), b.shape) if need[1] else None
        return [ga, gb]

    return _node("sub", data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "mul")
    with np.errstate(over="ignore"):
        data = a.data * b.data

    def vjp(g, need):
        ga = sum_to_shape(mul(g, b), a.shape) if need[0] else None
        gb = sum_to_shape(mul(g, a), b.shape) if need[1] else None
        return [ga, gb]

    return _node("mul", data, (a, b), vjp)


def power(x: Tensor, p: float) -> Tensor:
    """Elementwise x**p for a python float exponent."""
    p = float(p)
    with np.errstate(over="ignore", invalid="ignore"):
        data = np.power(x.data, p)

    def vjp(g, need):
        if not need[0]:
            return [None]
        return [mul(g, mul(power(x, p - 1.0), _as_tensor(p)))]

    return _node("power", data, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(x.data)

    def vjp(g, need):
        return [mul(g, out) if need[0] else None]

    out = _node("exp", data, (x,), vjp)
    return out


def _exp_neg_part(x: Tensor) -> Tensor:
    """exp(min(x, 0)); safe for arbitrarily large positive inputs."""
    data = np.exp(np.minimum(x.data, 0))

    def vjp(g, need):
        if not need[0]:
            return [None]
        mask = constant((x.data < 0).astype(_active_dtype()))
        return [mul(g, mul(mask, out))]

    out = _node("exp_neg_part", data, (x,), vjp)
    return out


def sigmoid(x: Tensor) -> Tensor:
    # evaluate via the sign split so neither branch overflows
    d = x.data
    e = np.exp(-np.abs(d))
    data = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(_active_dtype())

    def vjp(g, need):
        if not need[0]:
            return [None]
        return [mul(g, mul(out, sub(_as_tensor(1.0), out)))]

    out = _node("sigmoid", data, (x,), vjp)
    return out


def elu(x: Tensor) -> Tensor:
    """Exponential linear unit: x for x >= 0, exp(x) - 1 otherwise."""
    d = x.data
    data = np.where(d >= 0, d, np.expm1(np.minimum(d, 0))).astype(_active_dtype())

    def vjp(g, need):
        if not need[0]:
            return [None]
        pos = constant((x.data >= 0).astype(_active_dtype()))
        # derivative is 1 on the positive side, exp(x) on the negative side
        slope = add(pos, mul(sub(_as_tensor(1.0), pos), _exp_neg_part(x)))
        return [mul(g, slope)]

    return _node("elu", data, (x,), vjp)


def absolute(x: Tensor) -> Tensor:
    data = np.abs(x.data)

    def vjp(g, need):
        if not need[0]:
            return [None]
        return [mul(g, constant(np.sign(x.data)))]

    return _node("abs", data, (x,), vjp)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero where the clamp is active."""
    if not lo < hi:
        raise ShapeError(f"clip requires lo < hi, got {lo} >= {hi}")
    data = np.clip(x.data, lo, hi)

    def vjp(g, need):
        if not need[0]:
            return [None]
        inside = constant(((x.data > lo) & (x.data < hi)).astype(_active_dtype()))
        return [mul(g, inside)]

    return _node("clip", data, (x,), vjp)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Binary elementwise op with the public contract: shapes must match,
    except that a single-channel operand may broadcast over channels."""
    for i in range(4):
        if a.shape[i] != b.shape[i] and not (i == 1 and 1 in (a.shape[i], b.shape[i])):
            raise ShapeError(
                f"elementwise {kind}: shapes {a.shape} and {b.shape} differ "
                "outside the single-channel broadcast rule"
            )
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ShapeError(f"unknown elementwise kind {kind!r}")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "elu":
        return elu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ShapeError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# channel concat / slice
# ---------------------------------------------------------------------------


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    base = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(
                f"concat_channels: incompatible shapes {base} vs {t.shape}"
            )
    data = np.concatenate([t.data for t in xs], axis=1)
    splits = [t.shape[1] for t in xs]

    def vjp(g, need):
        outs = []
        start = 0
        for i, c in enumerate(splits):
            outs.append(slice_channels(g, start, start + c) if need[i] else None)
            start += c
        return outs

    return _node("concat_channels", data, tuple(xs), vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_channels [{start}:{stop}] out of range for {x.shape}")
    data = x.data[:, start:stop].copy()

    def vjp(g, need):
        if not need[0]:
            return [None]
        b, _, h, w = x.shape
        parts = []
        if start > 0:
            parts.append(constant(np.zeros((b, start, h, w), _active_dtype())))
        parts.append(g)
        if stop < x.shape[1]:
            parts.append(
                constant(np.zeros((b, x.shape[1] - stop, h, w), _active_dtype()))
            )
        return [concat_channels(parts) if len(parts) > 1 else g]

    return _node("slice_channels", data, (x,), vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _same_geometry(h, w, k, stride, dilation):
    """Output size and zero padding for ceil-mode 'same' convolution."""
    hout = -(-h // stride)
    wout = -(-w // stride)
    ke = (k - 1) * dilation + 1
    ph = max((hout - 1) * stride + ke - h, 0)
    pw = max((wout - 1) * stride + ke - w, 0)
    # extra padding goes to the bottom/right
    return hout, wout, (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)


def _im2col(xpad, k, stride, dilation, hout, wout):
    b, c = xpad.shape[:2]
    cols = np.empty((b, c, k, k, hout, wout), dtype=xpad.dtype)
    for ky in range(k):
        for kx in range(k):
            y0 = ky * dilation
            x0 = kx * dilation
            cols[:, :, ky, kx] = xpad[
                :,
                :,
                y0 : y0 + (hout - 1) * stride + 1 : stride,
                x0 : x0 + (wout - 1) * stride + 1 : stride,
            ]
    return cols.reshape(b, c * k * k, hout * wout)


def _col2im(gcols, pad_shape, k, stride, dilation, hout, wout):
    b, c, hp, wp = pad_shape
    acc = np.zeros(pad_shape, dtype=gcols.dtype)
    g6 = gcols.reshape(b, c, k, k, hout, wout)
    for ky in range(k):
        for kx in range(k):
            y0 = ky * dilation
            x0 = kx * dilation
            acc[
                :,
                :,
                y0 : y0 + (hout - 1) * stride + 1 : stride,
                x0 : x0 + (wout - 1) * stride + 1 : stride,
            ] += g6[:, :, ky, kx]
    return acc


def _conv_checks(x: Tensor, w: Tensor, stride: int, dilation: int):
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv weight must be (cout, cin, k, k), got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}"
        )
    if not (isinstance(stride, int) and stride >= 1):
        raise ShapeError(f"stride must be a positive int, got {stride!r}")
    if not (isinstance(dilation, int) and dilation >= 1):
        raise ShapeError(f"dilation must be a positive int, got {dilation!r}")


def _pad_input(xd, k, stride, dilation):
    b, c, h, w = xd.shape
    hout, wout, (pt, pb), (pl, pr) = _same_geometry(h, w, k, stride, dilation)
    xpad = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    return xpad, hout, wout, pt, pl


def _count_macs(b, cout, hout, wout, cin, k):
    counters.conv_macs += b * cout * hout * wout * cin * k * k


# cap on the float64 im2col buffer (elements); large maps are processed in
# horizontal bands of output rows so memory stays bounded
_COL_BUDGET = 16_000_000


def _bands(hout: int, b: int, cin: int, k: int, wout: int):
    rows = max(1, _COL_BUDGET // max(1, b * cin * k * k * wout))
    for r0 in range(0, hout, rows):
        yield r0, min(hout, r0 + rows)


def conv2d(
    x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, dilation: int = 1
) -> Tensor:
    """2-D convolution with zero 'same' padding (output = ceil(input/stride)).

    ``w`` is (cout, cin, k, k); ``bias``, if given, is (1, cout, 1, 1).
    """
    _conv_checks(x, w, stride, dilation)
    out = _conv_prim(x, w, stride, dilation)
    if bias is not None:
        if bias.shape != (1, w.shape[0], 1, 1):
            raise ShapeError(
                f"bias must be (1, {w.shape[0]}, 1, 1), got {bias.shape}"
            )
        out = add(out, bias)
    return out


def _conv_prim(x: Tensor, w: Tensor, stride: int, dilation: int) -> Tensor:
    b, cin, h, hw = x.shape
    cout, _, k, _ = w.shape
    xpad, hout, wout, _, _ = _pad_input(x.data.astype(np.float64), k, stride, dilation)
    wmat = w.data.astype(np.float64).reshape(cout, cin * k * k)
    ke = (k - 1) * dilation + 1
    y = np.empty((b, cout, hout, wout), dtype=_active_dtype())
    for r0, r1 in _bands(hout, b, cin, k, wout):
        slab = xpad[:, :, r0 * stride : (r1 - 1) * stride + ke]
        cols = _im2col(slab, k, stride, dilation, r1 - r0, wout)
        y[:, :, r0:r1] = (
            np.matmul(wmat, cols)
            .reshape(b, cout, r1 - r0, wout)
            .astype(_active_dtype())
        )
    _count_macs(b, cout, hout, wout, cin, k)

    def vjp(g, need):
        gx = _conv_input_grad(g, w, stride, dilation, x.shape) if need[0] else None
        gw = _conv_weight_grad(x, g, stride, dilation, w.shape) if need[1] else None
        return [gx, gw]

    return _node("conv2d", y, (x, w), vjp)


def _conv_input_grad(
    g: Tensor, w: Tensor, stride: int, dilation: int, x_shape: tuple
) -> Tensor:
    """Adjoint of conv2d with respect to its input (a primitive itself)."""
    b, cin, h, hw = x_shape
    cout, _, k, _ = w.shape
    hout, wout, (pt, pb), (pl, pr) = _same_geometry(h, hw, k, stride, dilation)
    if g.shape != (b, cout, hout, wout):
        raise ShapeError(f"input-grad cotangent shape {g.shape} mismatch")
    wmat = w.data.astype(np.float64).reshape(cout, cin * k * k)
    ke = (k - 1) * dilation + 1
    acc = np.zeros((b, cin, h + pt + pb, hw + pl + pr), dtype=np.float64)
    gd = g.data.astype(np.float64)
    for r0, r1 in _bands(hout, b, cin, k, wout):
        gcols = np.matmul(wmat.T, gd[:, :, r0:r1].reshape(b, cout, -1))
        slab_h = (r1 - r0 - 1) * stride + ke
        slab = _col2im(
            gcols, (b, cin, slab_h, hw + pl + pr), k, stride, dilation, r1 - r0, wout
        )
        acc[:, :, r0 * stride : r0 * stride + slab_h] += slab
    gx = acc[:, :, pt : pt + h, pl : pl + hw].astype(_active_dtype())
    _count_macs(b, cout, hout, wout, cin, k)

    def vjp(u, need):
        ug = _conv_prim(u, w, stride, dilation) if need[0] else None
        uw = _conv_weight_grad(u, g, stride, dilation, w.shape) if need[1] else None
        return [ug, uw]

    return _node("conv2d_input_grad", gx, (g, w), vjp)


def _conv_weight_grad(
    x: Tensor, g: Tensor, stride: int, dilation: int, w_shape: tuple
) -> Tensor:
    """Adjoint of conv2d with respect to its weight (a primitive itself)."""
    b, cin, h, hw = x.shape
    cout, _, k, _ = w_shape
    xpad, hout, wout, _, _ = _pad_input(x.data.astype(np.float64), k, stride, dilation)
    gd = g.data.astype(np.float64)
    ke = (k - 1) * dilation + 1
    gw_acc = np.zeros((cout, cin * k * k), dtype=np.float64)
    for r0, r1 in _bands(hout, b, cin, k, wout):
        slab = xpad[:, :, r0 * stride : (r1 - 1) * stride + ke]
        cols = _im2col(slab, k, stride, dilation, r1 - r0, wout)
        gmat = gd[:, :, r0:r1].reshape(b, cout, -1)
        gw_acc += np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
    gw = gw_acc.reshape(w_shape).astype(_active_dtype())
    _count_macs(b, cout, hout, wout, cin, k)

    def vjp(u, need):
        ux = _conv_input_grad(g, u, stride, dilation, x.shape) if need[0] else None
        ug = _conv_prim(x, u, stride, dilation) if need[1] else None
        return [ux, ug]

    return _node("conv2d_weight_grad", gw, (x, g), vjp)


def expand_depthwise(w: Tensor) -> Tensor:
    """Expand a depthwise kernel (c, 1, k, k) to a dense (c, c, k, k) kernel
    that is zero off the channel diagonal."""
    c, one, k, _ = w.shape
    if one != 1:
        raise ShapeError(f"depthwise kernel must be (c, 1, k, k), got {w.shape}")
    data = np.zeros((c, c, k, k), dtype=_active_dtype())
    idx = np.arange(c)
    data[idx, idx] = w.data[:, 0]

    def vjp(g, need):
        if not need[0]:
            return [None]
        return [_gather_diag(g)]

    return _node("expand_depthwise", data, (w,), vjp)


def _gather_diag(g: Tensor) -> Tensor:
    c = g.shape[0]
    idx = np.arange(c)
    data = g.data[idx, idx][:, None].copy()

    def vjp(u, need):
        return [expand_depthwise(u) if need[0] else None]

    return _node("gather_diag", data, (g,), vjp)


# ---------------------------------------------------------------------------
# resize primitives
# ---------------------------------------------------------------------------


def avg_downsample(x: Tensor, fh: int, fw: int | None = None) -> Tensor:
    """Block-average downsampling by integer factors (64-bit accumulation)."""
    fw = fh if fw is None else fw
    b, c, h, w = x.shape
    if fh < 1 or fw < 1:
        raise ShapeError("downsample factor must be >= 1")
    if h % fh or w % fw:
        raise ShapeError(f"size {(h, w)} not divisible by factor {(fh, fw)}")
    data = (
        x.data.reshape(b, c, h // fh, fh, w // fw, fw)
        .mean(axis=(3, 5), dtype=np.float64)
        .astype(_active_dtype())
    )

    def vjp(g, need):
        if not need[0]:
            return [None]
        return [mul(nearest_upsample(g, fh, fw), _as_tensor(1.0 / (fh * fw)))]

    return _node("avg_downsample", data, (x,), vjp)


def nearest_upsample(x: Tensor, fh: int, fw: int | None = None) -> Tensor:
    """Pixel-replication upsampling by integer factors."""
    fw = fh if fw is None else fw
    if fh < 1 or fw < 1:
        raise ShapeError("upsample factor must be >= 1")
    data = np.repeat(np.repeat(x.data, fh, axis=2), fw, axis=3)

    def vjp(g, need):
        if not need[0]:
            return [None]
        return [mul(avg_downsample(g, fh, fw), _as_tensor(float(fh * fw)))]

    return _node("nearest_upsample", data, (x,), vjp)


def matrix_resize(x: Tensor, rh: np.ndarray, rw: np.ndarray) -> Tensor:
    """Separable linear resize: rows mixed by ``rh``, columns by ``rw``.

    The matrices are float64 interpolation weights (built by the resample
    module); the op is linear, so its adjoint just transposes them.
    """
    if rh.shape[1] != x.shape[2] or rw.shape[1] != x.shape[3]:
        raise ShapeError(
            f"resize matrices {rh.shape}/{rw.shape} do not fit input {x.shape}"
        )
    xd = x.data.astype(np.float64)
    data = np.matmul(np.matmul(rh, xd), rw.T).astype(_active_dtype())

    def vjp(g, need):
        if not need[0]:
            return [None]
        return [matrix_resize(g, rh.T.copy(), rw.T.copy())]

    return _node("matrix_resize", data, (x,), vjp)


# ---------------------------------------------------------------------------
# patch mixing (attention transfer on feature maps)
# ---------------------------------------------------------------------------


def patch_mix(x: Tensor, mix: np.ndarray, kh: int, kw: int | None = None) -> Tensor:
    """Linearly recombine non-overlapping (kh, kw) patches.

    The map is split into a gh x gw grid of patches (row-major order) and
    every output patch q is ``sum_p mix[q, p] * patch_p``.  ``mix`` is a
    constant float64 matrix, either (n, n) shared across the batch or
    (b, n, n) per sample; gradients flow through the patch values, not
    the mixing weights.
    """
    kw = kh if kw is None else kw
    b, c, h, w = x.shape
    if h % kh or w % kw:
        raise ShapeError(f"map {(h, w)} not tileable by patch {(kh, kw)}")
    gh, gw = h // kh, w // kw
    n = gh * gw
    if mix.shape not in ((n, n), (b, n, n)):
        raise ShapeError(f"mix matrix {mix.shape} does not match {n} patches")
    u = (
        x.data.astype(np.float64)
        .reshape(b, c, gh, kh, gw, kw)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(b, n, c * kh * kw)
    )
    mixed = np.matmul(mix, u)
    data = (
        mixed.reshape(b, gh, gw, c, kh, kw)
        .transpose(0, 3, 1, 4, 2, 5)
        .reshape(b, c, h, w)
        .astype(_active_dtype())
    )
    counters.attention_macs += b * n * n * c * kh * kw
    mix_t = mix.T.copy() if mix.ndim == 2 else mix.transpose(0, 2, 1).copy()

    def vjp(g, need):
        if not need[0]:
            return [None]
        return [patch_mix(g, mix_t, kh, kw)]

    return _node("patch_mix", data, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    return sum_to_shape(x, (1, 1, 1, 1))


def mean_all(x: Tensor) -> Tensor:
    return mul(sum_all(x), _as_tensor(1.0 / x.size))


def sum_per_sample(x: Tensor) -> Tensor:
    """Sum over channels and space, keeping the batch axis: (b, 1, 1, 1)."""
    return sum_to_shape(x, (x.shape[0], 1, 1, 1))


# ---------------------------------------------------------------------------
# reverse-mode sweep
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list:
    seen = set()
    order = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order.append(node)
        stack.extend(node.parents)
    order.sort(key=lambda t: t.idx)
    return order


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of a scalar loss with respect to the given leaf tensors.

    Returned gradients are tensors in the live graph, so they can be
    differentiated again (used by the gradient-penalty loss).
    """
    if loss.size != 1:
        raise NumericError(f"loss must be scalar, got shape {loss.shape}")
    wrt = list(wrt)
    for t in wrt:
        if not t.requires_grad:
            raise NumericError("grad target does not require gradients")
    order = _toposort(loss)
    wanted = {id(t) for t in wrt}
    relevant: dict[int, bool] = {}
    for node in order:  # parents precede children in idx order
        rel = id(node) in wanted or any(relevant.get(id(p), False) for p in node.parents)
        relevant[id(node)] = rel
    cot: dict[int, Tensor] = {
        id(loss): Tensor(np.ones(loss.shape, dtype=_active_dtype()))
    }
    for node in reversed(order):
        g = cot.get(id(node))
        if g is None:
            continue
        if id(node) not in wanted:
            del cot[id(node)]
        if node.vjp is None or not relevant.get(id(node), False):
            continue
        need = tuple(
            p.requires_grad and relevant.get(id(p), False) for p in node.parents
        )
        if not any(need):
            continue
        contribs = node.vjp(g, need)
        for p, c in zip(node.parents, contribs):
            if c is None:
                continue
            prev = cot.get(id(p))
            cot[id(p)] = c if prev is None else add(prev, c)
    out = []
    for t in wrt:
        g = cot.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape, dtype=_active_dtype()))
        out.append(g)
    return out


class Graph:
    """Registry of named trainable parameters for one network.

    Ops are recorded implicitly as tensors are combined; the graph object
    owns the leaves and maps gradients back to their names.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def parameter(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float32), requires_grad=True)
        self._params[name] = t
        return t

    def add_parameters(self, arrays: dict) -> dict[str, Tensor]:
        return {name: self.parameter(name, arr) for name, arr in arrays.items()}

    @property
    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradient of the scalar loss for every registered parameter."""
        names = list(self._params)
        gs = grad(loss, [self._params[n] for n in names])
        return {n: g.data.astype(np.float32) for n, g in zip(names, gs)}


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    param: Tensor,
    eps: float = 1e-3,
    max_coords: int = 24,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the scalar loss from current parameter values; it
    is re-evaluated at perturbed parameters in float64 so the quotient is
    not limited by single-precision rounding of the loss.  The error at a
    coordinate is |analytic - numeric| / (|analytic| + 1e-8).
    """
    if eps <= 0:
        raise NumericError("finite difference step must be positive")
    analytic = grad(loss_fn(), [param])[0].data
    flat = param.data.reshape(-1)
    n = flat.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(n, size=max_coords, replace=False)
    worst = 0.0
    for i in coords:
        saved = flat[i]
        with precision(np.float64):
            flat[i] = saved + eps
            vp = float(flat[i])  # the perturbation as actually stored
            lp = float(loss_fn().data.reshape(()))
            flat[i] = saved - eps
            vm = float(flat[i])
            lm = float(loss_fn().data.reshape(()))
        flat[i] = saved
        numeric = (lp - lm) / (vp - vm)
        a = float(analytic.reshape(-1)[i])
        worst = max(worst, abs(a - numeric) / (abs(a) + 1e-8))
    return worst
