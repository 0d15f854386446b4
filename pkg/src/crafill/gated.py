"""Gated convolution layers: full gates and the three light-weight variants.

Every layer computes features F = conv(w_f, x) + b and a gate G, then
outputs sigmoid(G) * elu(F).  The variants differ only in how G is built:

    gc       full convolution, same shape as the feature branch
    lwgc_ds  depthwise k x k convolution followed by a pointwise 1 x 1
    lwgc_pw  pointwise 1 x 1 convolution
    lwgc_sc  full convolution to a single channel, broadcast over features

Gate branches carry no bias.  The depthwise stage of lwgc_ds uses the
layer's stride and dilation so the gate stays spatially aligned with the
features; its pointwise stage has stride 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor, conv2d, elu, expand_depthwise, mul, sigmoid
from .errors import ShapeError

GATE_KINDS = ("gc", "lwgc_ds", "lwgc_pw", "lwgc_sc")

_ALIASES = {"ds": "lwgc_ds", "pw": "lwgc_pw", "sc": "lwgc_sc"}


def normalize_gate_kind(kind: str) -> str:
    kind = _ALIASES.get(kind, kind)
    if kind not in GATE_KINDS:
        raise ShapeError(f"unknown gate kind {kind!r}; expected one of {GATE_KINDS}")
    return kind


def gate_param_count(kind: str, hk: int, wk: int, cin: int, cout: int) -> int:
    """Number of weights in the gate branch of one layer."""
    if min(hk, wk, cin, cout) < 1:
        raise ShapeError("all dimensions must be >= 1")
    kind = normalize_gate_kind(kind)
    if kind == "gc":
        return hk * wk * cin * cout
    if kind == "lwgc_ds":
        return hk * wk * cin + cin * cout
    if kind == "lwgc_pw":
        return cin * cout
    return hk * wk * cin  # lwgc_sc: single output channel


def glorot_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    cout, cin, kh, kw = shape
    fan_in = cin * kh * kw
    fan_out = cout * kh * kw
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


@dataclass(frozen=True)
class GatedConv:
    """Descriptor of one gated convolution layer; weights live in a
    name -> array mapping owned by the caller."""

    name: str
    cin: int
    cout: int
    kernel: int
    stride: int = 1
    dilation: int = 1
    gate_kind: str = "lwgc_pw"

    def __post_init__(self):
        object.__setattr__(self, "gate_kind", normalize_gate_kind(self.gate_kind))

    def param_shapes(self) -> dict[str, tuple]:
        k = self.kernel
        shapes = {
            f"{self.name}.w_f": (self.cout, self.cin, k, k),
            f"{self.name}.b": (1, self.cout, 1, 1),
        }
        if self.gate_kind == "gc":
            shapes[f"{self.name}.w_g"] = (self.cout, self.cin, k, k)
        elif self.gate_kind == "lwgc_ds":
            shapes[f"{self.name}.w_g_dw"] = (self.cin, 1, k, k)
            shapes[f"{self.name}.w_g_pw"] = (self.cout, self.cin, 1, 1)
        elif self.gate_kind == "lwgc_pw":
            shapes[f"{self.name}.w_g"] = (self.cout, self.cin, 1, 1)
        else:  # lwgc_sc
            shapes[f"{self.name}.w_g"] = (1, self.cin, k, k)
        return shapes

    def gate_weight_count(self) -> int:
        return sum(
            int(np.prod(s))
            for n, s in self.param_shapes().items()
            if ".w_g" in n
        )

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for pname, shape in self.param_shapes().items():
            if pname.endswith(".b"):
                params[pname] = np.zeros(shape, np.float32)
            else:
                params[pname] = glorot_uniform(rng, shape)
        return params

    def __call__(self, x: Tensor, params: dict[str, Tensor]) -> Tensor:
        if x.shape[1] != self.cin:
            raise ShapeError(
                f"layer {self.name}: expected {self.cin} input channels, "
                f"got {x.shape[1]}"
            )
        p = lambda suffix: params[f"{self.name}.{suffix}"]
        feat = conv2d(x, p("w_f"), p("b"), self.stride, self.dilation)
        if self.gate_kind == "gc":
            gate = conv2d(x, p("w_g"), None, self.stride, self.dilation)
        elif self.gate_kind == "lwgc_ds":
            dense = expand_depthwise(p("w_g_dw"))
            gate = conv2d(x, dense, None, self.stride, self.dilation)
            gate = conv2d(gate, p("w_g_pw"), None, 1, 1)
        elif self.gate_kind == "lwgc_pw":
            gate = conv2d(x, p("w_g"), None, self.stride, 1)
        else:  # lwgc_sc: single channel broadcast across features
            gate = conv2d(x, p("w_g"), None, self.stride, self.dilation)
        return mul(sigmoid(gate), elu(feat))


def gated_forward(x: Tensor, layer: GatedConv, params: dict[str, Tensor]) -> Tensor:
    """Functional alias for applying one gated layer."""
    return layer(x, params)


def as_tensors(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap a plain array mapping as constant tensors (inference path)."""
    return {k: engine.constant(v) for k, v in params.items()}
