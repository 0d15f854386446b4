"""The two-stage generator and the full-resolution inpainting pipeline.

The coarse network roughs in hole content at half the working resolution;
its prediction is blended into the input (hole region only) and the
refine network sharpens it, computing attention scores once from a
high-level feature map and transferring context patches at three feature
scales.  The pipeline wraps the generator for arbitrarily large inputs:
the network always runs at its base size, and full-resolution detail is
restored by aggregating high-frequency context residuals with the same
attention scores.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import attention, engine, resample, weights_io
from .arch import (
    COARSE_ARCH,
    REFINE_ARCH,
    TRANSFER_BRANCH_ARCHS,
    ConvToken,
    MarkToken,
    ResizeToken,
    parse_arch,
    scale_channels,
)
from .attention import AttentionScores, compute_scores, partition_cells, transfer_matrix
from .engine import Tensor, avg_downsample, clip, concat_channels, nearest_upsample
from .errors import MaskError, ShapeError, WeightsError
from .gated import GatedConv, normalize_gate_kind
from .resample import DEFAULT_PAIR, MethodPair

GENERATOR_INPUT_CHANNELS = 4  # masked image + mask plane

_resize_matrix_cache: dict[tuple[int, int], np.ndarray] = {}


def _bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    key = (n_in, factor)
    if key not in _resize_matrix_cache:
        _resize_matrix_cache[key] = resample.resize_matrix(
            n_in, n_in * factor, "bilinear"
        )
    return _resize_matrix_cache[key]


@dataclass
class GeneratorWeights:
    """Named parameter store plus the hyper-parameters that shape it."""

    arrays: dict[str, np.ndarray]
    width_mult: float = 1.0
    gates_coarse: str = "lwgc_sc"
    gates_refine: str = "lwgc_pw"
    base_size: int = 512

    @property
    def n_params(self) -> int:
        return sum(int(a.size) for a in self.arrays.values())

    def metadata(self) -> dict[str, str]:
        return {
            "format": "generator",
            "width_mult": repr(float(self.width_mult)),
            "gates_coarse": self.gates_coarse,
            "gates_refine": self.gates_refine,
            "base_size": str(self.base_size),
        }


def save_weights(weights: GeneratorWeights, path) -> None:
    weights_io.save_container(path, weights.arrays, weights.metadata())


def load_weights(path) -> GeneratorWeights:
    arrays, meta = weights_io.load_container(path)
    try:
        return GeneratorWeights(
            arrays=arrays,
            width_mult=float(meta["width_mult"]),
            gates_coarse=normalize_gate_kind(meta["gates_coarse"]),
            gates_refine=normalize_gate_kind(meta["gates_refine"]),
            base_size=int(meta["base_size"]),
        )
    except KeyError as exc:
        raise WeightsError(f"{path}: missing metadata field {exc}") from exc


class Generator:
    """Builds the layer graph for a given width multiplier and runs it."""

    def __init__(
        self,
        width_mult: float = 1.0,
        gates_coarse: str = "lwgc_sc",
        gates_refine: str = "lwgc_pw",
        base_size: int = 512,
    ):
        if base_size % 32 or base_size < 64:
            raise ShapeError(
                f"base size must be a multiple of 32 and >= 64, got {base_size}"
            )
        self.width_mult = float(width_mult)
        self.gates_coarse = normalize_gate_kind(gates_coarse)
        self.gates_refine = normalize_gate_kind(gates_refine)
        self.base_size = int(base_size)
        self.grid = self.base_size // 16
        self.coarse_ops = self._build("coarse", parse_arch(COARSE_ARCH),
                                      GENERATOR_INPUT_CHANNELS, self.gates_coarse)
        branch_channels = {}
        self.branch_ops = {}
        tap_channels = {"P1": scale_channels(32, width_mult),
                        "P2": scale_channels(64, width_mult),
                        "P3": scale_channels(128, width_mult)}
        for tap, text in TRANSFER_BRANCH_ARCHS.items():
            ops, cout = self._build_branch(tap, parse_arch(text), tap_channels[tap],
                                           self.gates_refine)
            self.branch_ops[tap] = ops
            branch_channels[tap] = cout
        self.refine_ops = self._build(
            "refine", parse_arch(REFINE_ARCH), GENERATOR_INPUT_CHANNELS,
            self.gates_refine, branch_channels=branch_channels,
        )

    # -- construction ------------------------------------------------------

    def _build(self, prefix, spec, cin, gate_kind, branch_channels=None):
        concat_order = deque(("P3", "P2", "P1"))
        ops = []
        conv_idx = 0
        channels = cin
        for tok in spec.tokens:
            if isinstance(tok, ConvToken):
                cout = scale_channels(tok.channels, self.width_mult)
                layer = GatedConv(
                    f"{prefix}.{conv_idx:02d}", channels, cout, tok.kernel,
                    tok.stride, tok.dilation, gate_kind,
                )
                ops.append(("conv", layer, tok.tap))
                channels = cout
                conv_idx += 1
            elif isinstance(tok, ResizeToken):
                if tok.kind == "downsample":
                    ops.append(("down", tok.factor))
                else:
                    # feature upsampling replicates pixels; the image-space
                    # upsample after the clip interpolates to stay smooth
                    # inside [-1, 1]
                    post_clip = any(op[0] == "clip" for op in ops)
                    ops.append(("up", tok.factor, "bilinear" if post_clip else "nearest"))
            elif isinstance(tok, MarkToken) and tok.kind == "concat":
                if branch_channels is None:
                    raise ShapeError(f"{prefix}: concat without attention branches")
                tap = concat_order.popleft()
                ops.append(("concat", tap))
                channels += branch_channels[tap]
            elif isinstance(tok, MarkToken) and tok.kind == "clip":
                ops.append(("clip",))
            else:
                raise ShapeError(f"{prefix}: unsupported token {tok}")
        return ops

    def _build_branch(self, tap, spec, cin, gate_kind):
        ops = []
        conv_idx = 0
        channels = cin
        for tok in spec.tokens:
            if isinstance(tok, ConvToken):
                cout = scale_channels(tok.channels, self.width_mult)
                layer = GatedConv(
                    f"att_{tap.lower()}.{conv_idx:02d}", channels, cout,
                    tok.kernel, tok.stride, tok.dilation, gate_kind,
                )
                ops.append(("conv", layer, None))
                channels = cout
                conv_idx += 1
            elif isinstance(tok, MarkToken) and tok.kind == "ATM":
                ops.append(("atm",))
        return ops, channels

    def _all_layers(self):
        for ops in (self.coarse_ops, self.refine_ops, *self.branch_ops.values()):
            for op in ops:
                if op[0] == "conv":
                    yield op[1]

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for layer in self._all_layers():
            shapes.update(layer.param_shapes())
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def init_weights(self, seed: int = 0, calibrate: bool = True) -> GeneratorWeights:
        """Fresh weights; by default each feature kernel is rescaled so its
        layer preserves activation scale.

        The sigmoid gates multiply activations by roughly one half at
        initialisation, which across the deep stacks collapses signal (and
        gradients) exponentially; the calibration pass walks the network
        once on seeded data and normalises every gated output to unit std.
        """
        rng = np.random.default_rng(seed)
        arrays = {}
        for layer in self._all_layers():
            arrays.update(layer.init_params(rng))
        if calibrate:
            self._calibrate(arrays, np.random.default_rng(seed ^ 0x5EED))
        return GeneratorWeights(
            arrays=arrays,
            width_mult=self.width_mult,
            gates_coarse=self.gates_coarse,
            gates_refine=self.gates_refine,
            base_size=self.base_size,
        )

    def _calibrate(self, arrays: dict, rng: np.random.Generator) -> None:
        s = self.base_size
        x = engine.constant(rng.uniform(-1.0, 1.0, (1, 3, s, s)).astype(np.float32))
        mask = engine.constant(np.zeros((1, 1, s, s), np.float32))
        params = {k: engine.constant(v) for k, v in arrays.items()}

        def hook(layer, t_in, t_out):
            name = f"{layer.name}.w_f"
            # image-range outputs stay inside the clip's linear region
            target = 0.5 if layer.cout == 3 else 1.0
            for _ in range(4):
                std = float(t_out.data.std())
                if 0.85 * target < std < 1.2 * target:
                    break
                scale = min(max(target / max(std, 1e-4), 0.1), 10.0)
                arrays[name] = (arrays[name] * np.float32(scale)).astype(np.float32)
                params[name] = engine.constant(arrays[name])
                t_out = layer(t_in, params)
            return t_out

        coarse = self._run(self.coarse_ops, concat_channels([x, mask]), params,
                           conv_hook=hook)
        blended = blend(coarse, x, mask)
        self._run_refine(blended, mask, params, conv_hook=hook)

    @classmethod
    def from_weights(cls, weights: GeneratorWeights) -> "Generator":
        gen = cls(
            width_mult=weights.width_mult,
            gates_coarse=weights.gates_coarse,
            gates_refine=weights.gates_refine,
            base_size=weights.base_size,
        )
        expected = gen.param_shapes()
        got = {k: tuple(v.shape) for k, v in weights.arrays.items()}
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(
            n for n in set(expected) & set(got) if expected[n] != got[n]
        )
        if missing or extra or wrong:
            raise WeightsError(
                "weight container does not match the architecture: "
                f"missing={missing[:6]} extra={extra[:6]} "
                + ", ".join(
                    f"{n}: file {got[n]} vs expected {expected[n]}" for n in wrong[:6]
                )
            )
        return gen

    # -- forward passes ----------------------------------------------------

    def _check_inputs(self, x: Tensor, mask: Tensor):
        s = self.base_size
        if x.shape[1] != 3 or x.shape[2:] != (s, s):
            raise ShapeError(f"generator expects (b, 3, {s}, {s}) images, got {x.shape}")
        if mask.shape != (x.shape[0], 1, s, s):
            raise ShapeError(
                f"mask shape {mask.shape} does not match images {x.shape}"
            )

    def _run(self, ops, t, params, taps=None, branch_outputs=None, conv_hook=None):
        for op in ops:
            kind = op[0]
            if kind == "conv":
                _, layer, tap = op
                t_in = t
                t = layer(t, params)
                if conv_hook is not None:
                    t = conv_hook(layer, t_in, t)
                if tap and taps is not None:
                    taps[tap] = t
            elif kind == "down":
                t = avg_downsample(t, op[1])
            elif kind == "up":
                if op[2] == "bilinear":
                    rh = _bilinear_matrix(t.shape[2], op[1])
                    rw = _bilinear_matrix(t.shape[3], op[1])
                    t = engine.matrix_resize(t, rh, rw)
                else:
                    t = nearest_upsample(t, op[1])
            elif kind == "clip":
                t = clip(t, -1.0, 1.0)
            elif kind == "concat":
                t = concat_channels([t, branch_outputs.popleft()])
        return t

    def coarse_forward(self, x: Tensor, mask: Tensor, params) -> Tensor:
        """Rough completion at the working resolution (computed at half
        size internally).  Input is the masked image stacked with the mask."""
        self._check_inputs(x, mask)
        masked = x * (1.0 - mask)
        t = concat_channels([masked, broadcast_mask(mask, x.shape[0])])
        return self._run(self.coarse_ops, t, params)

    def refine_forward(self, blended: Tensor, mask: Tensor, params):
        """Sharpened completion plus the per-sample attention scores.

        Scores are computed exactly once per sample, on a feature map
        pooled from the deepest tap, and reused for all three transfer
        branches (and later for image-level residual aggregation).
        """
        self._check_inputs(blended, mask)
        return self._run_refine(blended, mask, params)

    def _run_refine(self, blended, mask, params, conv_hook=None):
        b = blended.shape[0]
        t = concat_channels([blended, broadcast_mask(mask, b)])
        taps: dict[str, Tensor] = {}
        scores_list: list[AttentionScores] = []
        branch_outputs: deque[Tensor] = deque()
        for op in self.refine_ops:
            if op[0] == "concat" and not scores_list:
                scores_list = self._compute_scores(taps["P3"], mask)
                for tap in ("P3", "P2", "P1"):
                    branch_outputs.append(
                        self._run_branch(tap, taps[tap], scores_list, params, conv_hook)
                    )
            t = self._run([op], t, params, taps, branch_outputs, conv_hook)
        return t, scores_list

    def _compute_scores(self, p3: Tensor, mask: Tensor) -> list[AttentionScores]:
        p = avg_downsample(p3, 2)
        out = []
        for i in range(p.shape[0]):
            part = partition_cells(mask.data[i, 0], self.grid)
            out.append(compute_scores(p.data[i], part))
        return out

    def _run_branch(self, tap, t, scores_list, params, conv_hook=None) -> Tensor:
        k = t.shape[2] // self.grid
        mix = np.stack(
            [transfer_matrix(s, keep_context=True) for s in scores_list]
        )
        for op in self.branch_ops[tap]:
            if op[0] == "atm":
                t = engine.patch_mix(t, mix, k)
            else:
                t_in = t
                t = op[1](t, params)
                if conv_hook is not None:
                    t = conv_hook(op[1], t_in, t)
        return t

    def forward(self, x: Tensor, mask: Tensor, params):
        """Full two-stage pass: (coarse, blended, refined, scores)."""
        coarse = self.coarse_forward(x, mask, params)
        blended = blend(coarse, x, mask)
        refined, scores = self.refine_forward(blended, mask, params)
        return coarse, blended, refined, scores


def broadcast_mask(mask: Tensor, batch: int) -> Tensor:
    if mask.shape[0] == batch:
        return mask
    return engine.broadcast_to(mask, (batch, *mask.shape[1:]))


def blend(coarse_out: Tensor, x: Tensor, mask: Tensor) -> Tensor:
    """Replace the hole region of x with the coarse prediction."""
    if coarse_out.shape != x.shape:
        raise ShapeError(f"blend shapes differ: {coarse_out.shape} vs {x.shape}")
    return coarse_out * mask + x * (1.0 - mask)


def make_inference_fn(weights: GeneratorWeights):
    """Bind weights into a single-image callable:
    (image (1,3,s,s), mask (1,1,s,s)) -> (refined, AttentionScores)."""
    gen = Generator.from_weights(weights)
    params = {k: engine.constant(v) for k, v in weights.arrays.items()}

    def net(x_np: np.ndarray, m_np: np.ndarray):
        x = engine.constant(x_np)
        m = engine.constant(m_np)
        coarse = gen.coarse_forward(x, m, params)
        blended = blend(coarse, x, m)
        refined, scores = gen.refine_forward(blended, m, params)
        return refined.data, scores[0]

    net.generator = gen
    return net


# ---------------------------------------------------------------------------
# full-resolution pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    image: np.ndarray
    scores: AttentionScores
    timings: dict = field(default_factory=dict)
    factors: tuple[int, int] = (1, 1)


def inpaint_pipeline(
    raw: np.ndarray,
    mask: np.ndarray,
    model,
    pair: MethodPair = DEFAULT_PAIR,
    base_size: int | None = None,
) -> PipelineResult:
    """Inpaint an image of any size whose height and width are multiples
    of the generator's base size.

    ``model`` is either a GeneratorWeights or a callable
    (image, mask) -> (refined, scores) operating at base size.  Steps:
    shrink to base size, run the generator, enlarge its output, compute
    contextual residuals from the raw input, aggregate them into the hole
    with the shared attention scores, and paste the raw image back over
    everything outside the mask.
    """
    if isinstance(model, GeneratorWeights):
        base_size = model.base_size
        net = make_inference_fn(model)
    else:
        net = model
        base_size = base_size or 512
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[0] != 3:
        raise ShapeError(f"raw image must be (3, h, w), got {raw.shape}")
    if raw.dtype != np.float32:
        raise ShapeError(f"raw image must be float32, got {raw.dtype}")
    if not np.isfinite(raw).all():
        raise ShapeError("raw image contains non-finite values")
    if np.abs(raw).max() > 1.0 + 1e-5:
        raise ShapeError("raw image values must be scaled to [-1, 1]")
    h, w = raw.shape[1:]
    if h % base_size or w % base_size:
        raise ShapeError(
            f"image size {(h, w)} must be a multiple of the base size {base_size}"
        )
    mask2d = attention.as_mask2d(mask)
    if mask2d.shape != (h, w):
        raise ShapeError(f"mask shape {mask2d.shape} does not match image {(h, w)}")
    if mask2d.all():
        raise MaskError("mask covers the whole image; nothing to attend to")
    fh, fw = h // base_size, w // base_size

    timings = {}
    t0 = time.perf_counter()
    x_small = resample.downsample(raw, (fh, fw), pair.down)
    m_small = (
        resample.downsample(mask2d, (fh, fw), "averaging") > 0
    ).astype(np.float32)
    timings["resample"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    y_small, scores = net(x_small[None], m_small[None, None])
    timings["network"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    y_big = resample.upsample(y_small[0], (fh, fw), pair.up)
    residual = resample.contextual_residual(raw, (fh, fw), pair)
    timings["resample"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    aggregate = attention.aggregate_residuals(residual, scores)
    timings["aggregation"] = time.perf_counter() - t0

    out_hole = y_big.astype(np.float64) + aggregate
    hole = mask2d.astype(bool)[None]
    image = np.where(hole, out_hole, raw.astype(np.float64)).astype(np.float32)
    return PipelineResult(image=image, scores=scores, timings=timings, factors=(fh, fw))
