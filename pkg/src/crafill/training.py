"""Losses, discriminator and the alternating adversarial training loop.

The discriminator is trained with the Wasserstein objective plus a
gradient penalty pushing the input-gradient norm of interpolated samples
toward one; the generator minimises a masked L1 reconstruction loss (a
smaller constant weight on hole pixels than on context pixels) plus a
weakly weighted adversarial term.  Per outer iteration the discriminator
takes several updates, then the generator takes one; both generator
stages are trained together by summing their reconstruction terms.

The discriminator only ever sees pasted images: generated content inside
the hole, original pixels outside.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch import DISCRIMINATOR_ARCH, ConvToken, DenseToken, parse_arch, scale_channels
from .engine import (
    Graph,
    Tensor,
    absolute,
    constant,
    conv2d,
    elu,
    grad,
    mean_all,
    power,
    sum_all,
    sum_per_sample,
    tensor,
)
from .errors import MaskError, NumericError, ShapeError, TrainingError
from .gated import glorot_uniform
from .generator import Generator, GeneratorWeights, save_weights
from .attention import partition_cells
from .masks import MaskSpec, generate_mask


@dataclass
class TrainingConfig:
    steps: int = 100  # generator updates
    alpha_hole: float = 1.0
    alpha_context: float = 1.2
    adv_weight: float = 1e-4
    gp_weight: float = 10.0
    d_steps_per_g: int = 5
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    adam_eps: float = 1e-8
    seed: int = 0
    image_size: int = 512
    width_mult: float = 1.0
    gates_coarse: str = "lwgc_sc"
    gates_refine: str = "lwgc_pw"
    checkpoint_every: int = 100
    mask: MaskSpec = field(default_factory=MaskSpec)

    @classmethod
    def toy(cls, **overrides) -> "TrainingConfig":
        """Desk-scale defaults: quarter width at 128x128."""
        base = dict(image_size=128, width_mult=0.25, batch_size=2)
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------


class Discriminator:
    """Strided conv stack ending in a single score per sample."""

    def __init__(self, width_mult: float = 1.0, image_size: int = 512):
        self.image_size = int(image_size)
        self.width_mult = float(width_mult)
        spec = parse_arch(DISCRIMINATOR_ARCH)
        self.convs = []
        channels = 3
        size = self.image_size
        for i, tok in enumerate(spec.tokens):
            if isinstance(tok, ConvToken):
                cout = scale_channels(tok.channels, width_mult)
                self.convs.append(
                    (f"disc.{i:02d}", channels, cout, tok.kernel, tok.stride)
                )
                channels = cout
                size = -(-size // tok.stride)
            elif isinstance(tok, DenseToken):
                if tok.units != 1:
                    raise ShapeError("discriminator head must map to one unit")
        if size < 1:
            raise ShapeError(f"image size {image_size} too small for this stack")
        self.feature_shape = (channels, size, size)

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for name, cin, cout, k, _ in self.convs:
            shapes[f"{name}.w"] = (cout, cin, k, k)
            shapes[f"{name}.b"] = (1, cout, 1, 1)
        shapes["disc.fc.w"] = (1, *self.feature_shape)
        shapes["disc.fc.b"] = (1, 1, 1, 1)
        return shapes

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape, np.float32)
            elif name == "disc.fc.w":
                c, hh, ww = self.feature_shape
                limit = np.sqrt(6.0 / (c * hh * ww + 1))
                params[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
            else:
                params[name] = glorot_uniform(rng, shape)
        return params

    def forward(self, x: Tensor, params: dict[str, Tensor]) -> Tensor:
        if x.shape[1] != 3 or x.shape[2:] != (self.image_size, self.image_size):
            raise ShapeError(
                f"discriminator expects (b, 3, {self.image_size}, "
                f"{self.image_size}), got {x.shape}"
            )
        t = x
        for name, _, _, _, stride in self.convs:
            t = elu(conv2d(t, params[f"{name}.w"], params[f"{name}.b"], stride))
        # fully connected to a single unit, kept as 4-D tensors throughout
        score = sum_per_sample(t * params["disc.fc.w"])
        return score + params["disc.fc.b"]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _check_binary_mask(m: Tensor):
    vals = np.unique(m.data)
    if not np.isin(vals, (0.0, 1.0)).all():
        raise MaskError(f"mask must be binary 0/1, found values {vals[:8]}")


def d_loss(
    disc: Discriminator,
    params: dict[str, Tensor],
    x_real: np.ndarray,
    x_fake_pasted: np.ndarray,
    gp_weight: float,
    rng: np.random.Generator,
) -> tuple[Tensor, dict]:
    """Critic loss: E[D(fake)] - E[D(real)] + gp_weight * penalty, the
    penalty being the squared distance of per-sample input-gradient norms
    from one, measured at a random interpolate of real and fake."""
    if x_real.shape != x_fake_pasted.shape:
        raise ShapeError(
            f"batch mismatch: real {x_real.shape} vs fake {x_fake_pasted.shape}"
        )
    mix = float(rng.uniform())  # one draw per batch, as in the procedure
    x_hat = tensor(
        ((1.0 - mix) * x_real + mix * x_fake_pasted).astype(np.float32),
        requires_grad=True,
    )
    score_real = disc.forward(constant(x_real), params)
    score_fake = disc.forward(constant(x_fake_pasted), params)
    score_hat = disc.forward(x_hat, params)
    gx = grad(sum_all(score_hat), [x_hat])[0]
    norms = power(sum_per_sample(gx * gx) + 1e-12, 0.5)
    penalty = mean_all(power(norms - 1.0, 2.0))
    loss = mean_all(score_fake) - mean_all(score_real) + gp_weight * penalty
    stats = {
        "d_real": mean_all(score_real).item(),
        "d_fake": mean_all(score_fake).item(),
        "penalty": penalty.item(),
    }
    return loss, stats


def g_losses(
    refine_out: Tensor,
    x: Tensor,
    mask: Tensor,
    coarse_out: Tensor | None = None,
    fake_score: Tensor | None = None,
    alpha_hole: float = 1.0,
    alpha_context: float = 1.2,
    adv_weight: float = 1e-4,
) -> dict[str, Tensor]:
    """Reconstruction, adversarial and total generator losses.

    The L1 terms are means over all pixels of the masked difference maps,
    so a hole covering a quarter of the image contributes a quarter-sized
    hole term.  The coarse stage's reconstruction enters with the same
    weights as the refine stage's.
    """
    _check_binary_mask(mask)
    inv = 1.0 - mask

    def rec(out):
        diff = absolute(out - x)
        return alpha_hole * mean_all(diff * mask) + alpha_context * mean_all(diff * inv)

    l_rec = rec(refine_out)
    if coarse_out is not None:
        l_rec = l_rec + rec(coarse_out)
    if fake_score is not None:
        l_adv = -1.0 * mean_all(fake_score)
    else:
        l_adv = constant(np.zeros((1, 1, 1, 1), np.float32))
    total = l_rec + adv_weight * l_adv
    return {"rec": l_rec, "adv": l_adv, "total": total}


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, lr=1e-4, beta1=0.5, beta2=0.9, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            m_hat = m / (1.0 - b1**self.t)
            v_hat = v / (1.0 - b2**self.t)
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                np.float32
            )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    weights: GeneratorWeights
    history: list
    d_updates: int
    g_updates: int


def _sample_batch(dataset, size, rng):
    idx = rng.integers(0, dataset.shape[0], size=size)
    return dataset[idx]


def _make_masks(n, size, spec, rng, grid):
    """Draw masks, redrawing any that leave no context cell at the
    attention grid (possible for coarse grids under the any-overlap rule)."""
    out = []
    for _ in range(n):
        for _ in range(20):
            m = generate_mask(size, size, spec, rng)
            try:
                partition_cells(m, grid)
            except MaskError:
                continue
            out.append(m)
            break
        else:
            raise TrainingError(
                "mask generator kept producing masks with no context cells"
            )
    return np.stack(out)


def train(
    cfg: TrainingConfig,
    dataset: np.ndarray,
    out_dir=None,
    log_path=None,
    initial_weights: GeneratorWeights | None = None,
) -> TrainResult:
    """Alternating loop: several critic updates, then one generator update.

    Emits checkpoints into ``out_dir`` (including one before any update)
    and line-delimited JSON records into ``log_path``.  A non-finite value
    anywhere aborts with a diagnostic.
    """
    dataset = np.asarray(dataset, dtype=np.float32)
    if dataset.ndim != 4 or dataset.shape[0] == 0:
        raise TrainingError(
            f"dataset must be a non-empty (n, 3, s, s) array, got {dataset.shape}"
        )
    s = cfg.image_size
    if dataset.shape[1:] != (3, s, s):
        raise TrainingError(
            f"dataset images are {dataset.shape[1:]}, expected (3, {s}, {s})"
        )
    if np.abs(dataset).max() > 1.0 + 1e-5:
        raise TrainingError("dataset values must be scaled to [-1, 1]")

    gen = Generator(cfg.width_mult, cfg.gates_coarse, cfg.gates_refine, s)
    if initial_weights is not None:
        Generator.from_weights(initial_weights)  # validates against the arch
        start_arrays = initial_weights.arrays
    else:
        start_arrays = gen.init_weights(cfg.seed).arrays
    disc = Discriminator(cfg.width_mult, s)

    g_graph = Graph()
    g_params = g_graph.add_parameters(start_arrays)
    d_graph = Graph()
    seq = np.random.SeedSequence(cfg.seed)
    rng_init_d, rng_batch, rng_mask, rng_alpha = [
        np.random.default_rng(c) for c in seq.spawn(4)
    ]
    d_params = d_graph.add_parameters(disc.init_params(rng_init_d))

    adam_g = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    adam_d = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "w") if log_path is not None else None

    def snapshot() -> GeneratorWeights:
        return GeneratorWeights(
            arrays={k: v.data.copy() for k, v in g_params.items()},
            width_mult=cfg.width_mult,
            gates_coarse=gen.gates_coarse,
            gates_refine=gen.gates_refine,
            base_size=s,
        )

    def checkpoint(step):
        if out_dir is not None:
            save_weights(snapshot(), out_dir / f"checkpoint_{step:06d}.craw")

    checkpoint(0)
    history = []
    d_updates = g_updates = 0
    try:
        for step in range(1, cfg.steps + 1):
            t_start = time.perf_counter()
            last_d = float("nan")
            for _ in range(cfg.d_steps_per_g):
                x = _sample_batch(dataset, cfg.batch_size, rng_batch)
                masks = _make_masks(cfg.batch_size, s, cfg.mask, rng_mask, gen.grid)[:, None]
                y = _generator_apply(gen, g_params, x, masks, build_graph=False)
                pasted = (y * masks + x * (1.0 - masks)).astype(np.float32)
                loss, _ = d_loss(disc, d_params, x, pasted, cfg.gp_weight, rng_alpha)
                adam_d.step(d_params, d_graph.backward(loss))
                d_updates += 1
                last_d = loss.item()

            x = _sample_batch(dataset, cfg.batch_size, rng_batch)
            masks = _make_masks(cfg.batch_size, s, cfg.mask, rng_mask, gen.grid)[:, None]
            xt = constant(x)
            mt = constant(masks)
            coarse, _, refined, _ = gen.forward(xt, mt, g_params)
            pasted = refined * mt + xt * (1.0 - mt)
            fake_score = disc.forward(pasted, d_params)
            losses = g_losses(
                refined,
                xt,
                mt,
                coarse_out=coarse,
                fake_score=fake_score,
                alpha_hole=cfg.alpha_hole,
                alpha_context=cfg.alpha_context,
                adv_weight=cfg.adv_weight,
            )
            adam_g.step(g_params, g_graph.backward(losses["total"]))
            g_updates += 1

            record = {
                "step": step,
                "loss_d": last_d,
                "loss_rec": losses["rec"].item(),
                "loss_adv": losses["adv"].item(),
                "loss_g": losses["total"].item(),
                "seconds": time.perf_counter() - t_start,
            }
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                checkpoint(step)
    except NumericError as exc:
        raise TrainingError(
            f"training diverged (non-finite value) at generator step "
            f"{g_updates + 1}: {exc}"
        ) from exc
    finally:
        if log_fh is not None:
            log_fh.close()

    if cfg.steps and out_dir is not None:
        checkpoint(cfg.steps)
    return TrainResult(
        weights=snapshot(), history=history, d_updates=d_updates, g_updates=g_updates
    )


def _generator_apply(gen, g_params, x, masks, build_graph: bool):
    """Run the generator; with build_graph=False the weights are treated as
    constants so no op graph is retained (critic updates)."""
    if build_graph:
        params = g_params
    else:
        params = {k: constant(v.data) for k, v in g_params.items()}
    _, _, refined, _ = gen.forward(constant(x), constant(masks), params)
    return refined.data
