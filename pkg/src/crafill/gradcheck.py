"""Finite-difference self-checks over every differentiable op and all
gate variants; backs the ``checkgrad`` command and the acceptance suite."""

from __future__ import annotations

import numpy as np

from . import engine
from .engine import (
    Graph,
    absolute,
    avg_downsample,
    clip,
    concat_channels,
    constant,
    conv2d,
    elu,
    exp,
    expand_depthwise,
    finite_diff_check,
    matrix_resize,
    mean_all,
    nearest_upsample,
    patch_mix,
    power,
    sigmoid,
    slice_channels,
    sum_per_sample,
)
from .gated import GATE_KINDS, GatedConv


def run_gradient_suite(seed: int = 0, eps: float = 1e-3) -> dict[str, float]:
    """Max relative finite-difference error per op, on small tensors.

    Every loss below is built from the op under test plus smooth
    reductions, evaluated at random points away from kinks.
    """
    rng = np.random.default_rng(seed)
    g = Graph()

    def p(name, shape, scale=0.5):
        return g.parameter(name, rng.standard_normal(shape) * scale)

    x = p("x", (2, 3, 6, 6))
    x2 = p("x2", (1, 3, 8, 8))
    wc = p("wc", (4, 3, 3, 3), 0.4)
    bc = p("bc", (1, 4, 1, 1), 0.1)
    wd = p("wd", (3, 1, 3, 3), 0.4)
    noise = constant(rng.standard_normal((2, 3, 6, 6)).astype(np.float32))
    rh = rng.uniform(0.0, 0.4, (8, 6))
    rw = rng.uniform(0.0, 0.4, (9, 6))
    mix = rng.uniform(0.0, 0.5, (9, 9))

    conv_s1 = lambda: mean_all(conv2d(x, wc, bc))
    conv_s2 = lambda: mean_all(conv2d(x, wc, bc, stride=2, dilation=2))
    cases = [
        ("add", lambda: mean_all(x + noise), x),
        ("sub", lambda: mean_all(noise - x), x),
        ("mul", lambda: mean_all(x * x), x),
        ("mul_channel_broadcast", lambda: mean_all(x * slice_channels(x, 0, 1)), x),
        ("power", lambda: mean_all(power(x * x + 1.0, 1.5)), x),
        ("exp", lambda: mean_all(exp(x)), x),
        ("sigmoid", lambda: mean_all(sigmoid(x)), x),
        ("elu", lambda: mean_all(elu(x)), x),
        ("abs", lambda: mean_all(absolute(x)), x),
        ("clip", lambda: mean_all(clip(x, -0.4, 0.4)), x),
        (
            "concat_slice",
            lambda: mean_all(slice_channels(concat_channels([x, x]), 2, 5)),
            x,
        ),
        ("conv2d_input", conv_s2, x),
        ("conv2d_weight", conv_s2, wc),
        ("conv2d_bias", conv_s1, bc),
        ("conv2d_double_backward", lambda: _gp_shaped(x2, wc), wc),
        ("expand_depthwise", lambda: mean_all(conv2d(x2, expand_depthwise(wd))), wd),
        (
            "avg_downsample",
            lambda: mean_all(avg_downsample(x, 2) * avg_downsample(x, 2)),
            x,
        ),
        (
            "nearest_upsample",
            lambda: mean_all(nearest_upsample(x, 2) * nearest_upsample(x, 2)),
            x,
        ),
        (
            "matrix_resize",
            lambda: mean_all(power(matrix_resize(x, rh, rw) + 2.0, 2.0)),
            x,
        ),
        ("patch_mix", lambda: mean_all(patch_mix(x, mix, 2) * patch_mix(x, mix, 2)), x),
        ("sum_per_sample", lambda: mean_all(sum_per_sample(x * x)), x),
    ]

    results: dict[str, float] = {}
    for name, fn, target in cases:
        results[name] = finite_diff_check(fn, target, eps=eps, rng=rng)

    for kind in GATE_KINDS:
        layer = GatedConv(f"gate_{kind}", 3, 4, 3, stride=2, gate_kind=kind)
        gg = Graph()
        params = gg.add_parameters(layer.init_params(rng))
        xg = engine.tensor(rng.standard_normal((1, 3, 6, 6)).astype(np.float32) * 0.5)

        def loss_fn(layer=layer, params=params, xg=xg):
            return mean_all(layer(xg, params))

        worst = 0.0
        for pt in params.values():
            worst = max(worst, finite_diff_check(loss_fn, pt, eps=eps, rng=rng))
        results[f"gated_{kind}"] = worst
    return results


def _gp_shaped(x2, wc):
    # squared input-gradient norm, the shape of the adversarial penalty;
    # checked with respect to the weight
    xi = engine.tensor(x2.data.copy(), requires_grad=True)
    score = engine.sum_all(elu(conv2d(xi, wc)))
    gx = engine.grad(score, [xi])[0]
    return mean_all(gx * gx)
