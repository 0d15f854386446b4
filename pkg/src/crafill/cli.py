"""Command-line interface.

Subcommands: inpaint (complete one image), bench (resolution-scaling
report), train (the alternating adversarial loop), maskgen (seeded random
masks), checkgrad (finite-difference suite).

Exit codes: 0 success, 1 usage error, 2 IO/weight errors, 3 numeric
failure, 4 dimension violations.  CRA_DETERMINISTIC=1 forces single
threaded execution regardless of --threads.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import images, validation
from .engine import counters
from .errors import (
    ArchError,
    MaskError,
    NumericError,
    ShapeError,
    TrainingError,
    WeightsError,
)
from .generator import Generator, inpaint_pipeline, load_weights
from .masks import MaskSpec, generate_mask
from .resample import MethodPair

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3
EXIT_DIMENSION = 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crafill", description=__doc__.split("\n\n")[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("inpaint", help="complete one image under a mask")
    sp.add_argument("--input", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--down", default="averaging",
                    choices=["avg", "averaging", "nearest", "bilinear", "bicubic"])
    sp.add_argument("--up", default="bilinear",
                    choices=["nearest", "bilinear", "bicubic"])
    sp.add_argument("--pad", action="store_true",
                    help="reflect-pad to the required multiple and crop back")
    sp.add_argument("--dump-scores", default=None,
                    help="write the attention score matrix to this file")

    sp = sub.add_parser("bench", help="resolution-scaling cost report (CSV)")
    sp.add_argument("--weights", default=None)
    sp.add_argument("--toy", action="store_true",
                    help="use freshly initialised quarter-width weights")
    sp.add_argument("--bench-sizes", default="512,1024,2048")
    sp.add_argument("--output", default=None, help="CSV path (default stdout)")

    sp = sub.add_parser("train", help="run the adversarial training loop")
    sp.add_argument("--dataset", required=True, help="directory of RGB PNGs")
    sp.add_argument("--out", required=True, help="checkpoint/log directory")
    sp.add_argument("--steps", type=int, default=100)
    sp.add_argument("--toy", action="store_true",
                    help="quarter width at 128x128, batch 2")
    sp.add_argument("--image-size", type=int, default=None)
    sp.add_argument("--width", type=float, default=None)
    sp.add_argument("--batch", type=int, default=None)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--checkpoint-every", type=int, default=100)
    sp.add_argument("--gates-coarse", default="lwgc_sc")
    sp.add_argument("--gates-refine", default="lwgc_pw")
    sp.add_argument("--mask-templates", default=None,
                    help="directory of template masks (enables mixed mode)")

    sp = sub.add_parser("maskgen", help="write n seeded random masks")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--size", default="512x512")
    sp.add_argument("--mode", default="brush", choices=["brush", "template", "mixed"])
    sp.add_argument("--max-area", type=float, default=0.25)
    sp.add_argument("--templates", default=None)

    sp = sub.add_parser("checkgrad", help="finite-difference gradient suite")
    sp.add_argument("--eps", type=float, default=1e-3)
    return p


def _deterministic(args) -> int | None:
    if os.environ.get("CRA_DETERMINISTIC") == "1":
        return 1
    return args.threads


def cmd_inpaint(args) -> int:
    raw = images.load_image(args.input)
    mask = images.load_mask(args.mask)
    if mask.shape != raw.shape[1:]:
        raise ShapeError(
            f"mask size {mask.shape} does not match image {raw.shape[1:]}"
        )
    weights = load_weights(args.weights)
    base = weights.base_size
    h0, w0 = raw.shape[1:]
    if args.pad:
        raw, _ = validation.reflect_pad_to_multiple(raw, base)
        mask = validation.zero_pad_to_multiple(mask, base)
    down = "averaging" if args.down == "avg" else args.down
    pair = MethodPair(down=down, up=args.up)
    result = inpaint_pipeline(raw, mask, weights, pair)
    images.save_image(args.output, result.image[:, :h0, :w0])
    if args.dump_scores:
        from .attention import dump_scores

        dump_scores(result.scores, args.dump_scores)
    total = sum(result.timings.values())
    for stage in ("resample", "network", "aggregation"):
        print(f"{stage:12s} {result.timings[stage] * 1e3:9.1f} ms")
    print(f"{'total':12s} {total * 1e3:9.1f} ms")
    print(f"wrote {args.output}")
    return EXIT_OK


def _estimate_peak_bytes(h, w, base, width_mult) -> int:
    # image-side buffers: raw/blur float32, residual + aggregate + output
    # float64; network-side: bounded im2col plus the widest activations
    image_side = h * w * 3 * (4 + 4 + 8 + 8 + 8)
    act = 128 * base * base * 4 * max(width_mult, 0.25)
    return int(image_side + act * 4 + 16_000_000 * 8)


def cmd_bench(args, seed) -> int:
    sizes = [int(s) for s in args.bench_sizes.split(",") if s]
    if args.weights:
        weights = load_weights(args.weights)
    elif args.toy:
        weights = Generator(width_mult=0.25, base_size=512).init_weights(seed)
    else:
        raise _UsageError("bench needs --weights or --toy")
    base = weights.base_size
    for s in sizes:
        if s % base:
            raise ShapeError(f"bench size {s} is not a multiple of base {base}")
    rng = np.random.default_rng(seed)
    rows = []
    for s in sizes:
        raw = (rng.integers(0, 256, (3, s, s)).astype(np.float32) / 127.5) - 1.0
        mask = np.zeros((s, s), np.float32)
        q = s // 4
        mask[q : 2 * q, q : 2 * q] = 1.0  # fixed relative hole
        counters.reset()
        t0 = time.perf_counter()
        inpaint_pipeline(raw, mask, weights)
        wall = time.perf_counter() - t0
        snap = counters.snapshot()
        rows.append(
            {
                "resolution": s,
                "conv_macs": snap["conv_macs"],
                "attention_macs": snap["attention_macs"],
                "resample_taps": snap["resample_taps"],
                "aggregation_macs": snap["aggregation_macs"],
                "peak_bytes_est": _estimate_peak_bytes(s, s, base, weights.width_mult),
                "wall_seconds": f"{wall:.4f}",
            }
        )
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
    text = buf.getvalue()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    macs = {r["conv_macs"] for r in rows}
    if len(macs) != 1:
        raise NumericError(f"conv MAC count varies with resolution: {sorted(macs)}")
    print(f"conv MACs constant across resolutions: {macs.pop()}", file=sys.stderr)
    return EXIT_OK


def _load_templates(path):
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise MaskError(f"no template PNGs found in {path}")
    return tuple(images.load_mask(f) for f in files)


def cmd_train(args, seed) -> int:
    from .resample import resize_to
    from .training import TrainingConfig, train

    files = sorted(Path(args.dataset).glob("*.png"))
    if not files:
        raise TrainingError(f"no PNG images found in {args.dataset}")
    size = args.image_size or (128 if args.toy else 512)
    width = args.width if args.width is not None else (0.25 if args.toy else 1.0)
    batch = args.batch or (2 if args.toy else 8)
    data = []
    for f in files:
        img = images.load_image(f)
        if img.shape[1:] != (size, size):
            img = np.clip(resize_to(img, size, size), -1.0, 1.0).astype(np.float32)
        data.append(img)
    mask_spec = MaskSpec()
    if args.mask_templates:
        mask_spec = MaskSpec(mode="mixed", templates=_load_templates(args.mask_templates))
    cfg = TrainingConfig(
        steps=args.steps,
        batch_size=batch,
        lr=args.lr,
        seed=seed,
        image_size=size,
        width_mult=width,
        gates_coarse=args.gates_coarse,
        gates_refine=args.gates_refine,
        checkpoint_every=args.checkpoint_every,
        mask=mask_spec,
    )
    out_dir = Path(args.out)
    result = train(cfg, np.stack(data), out_dir=out_dir, log_path=out_dir / "train.jsonl")
    final = out_dir / f"checkpoint_{cfg.steps:06d}.craw"
    print(
        f"trained {result.g_updates} generator / {result.d_updates} critic updates "
        f"({result.weights.n_params:,} generator parameters); "
        f"final checkpoint {final}"
    )
    return EXIT_OK


def cmd_maskgen(args, seed) -> int:
    try:
        h, w = (int(v) for v in args.size.lower().split("x"))
    except ValueError as exc:
        raise _UsageError(f"bad --size {args.size!r}, expected HxW") from exc
    templates = _load_templates(args.templates) if args.templates else ()
    spec = MaskSpec(mode=args.mode, max_area_fraction=args.max_area, templates=templates)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        images.save_mask(out / f"mask_{i:05d}.png", generate_mask(h, w, spec, rng))
    print(f"wrote {args.n} masks to {out}")
    return EXIT_OK


def cmd_checkgrad(args, seed) -> int:
    from .gradcheck import run_gradient_suite

    results = run_gradient_suite(seed, eps=args.eps)
    width = max(len(k) for k in results)
    worst = 0.0
    for name, err in results.items():
        flag = "ok" if err < 1e-3 else "FAIL"
        print(f"{name:<{width}s} {err:10.3e} {flag}")
        worst = max(worst, err)
    if worst >= 1e-3:
        raise NumericError(f"gradient checks exceeded tolerance: {worst:.3e}")
    print(f"all {len(results)} checks < 1e-3 (worst {worst:.3e})")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        limit = validation.set_num_threads(_deterministic(args))
        try:
            if args.command == "inpaint":
                return cmd_inpaint(args)
            if args.command == "bench":
                return cmd_bench(args, args.seed)
            if args.command == "train":
                return cmd_train(args, args.seed)
            if args.command == "maskgen":
                return cmd_maskgen(args, args.seed)
            if args.command == "checkgrad":
                return cmd_checkgrad(args, args.seed)
            raise _UsageError(f"unknown command {args.command!r}")
        finally:
            if limit is not None:
                limit.unregister()
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WeightsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, TrainingError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShapeError, MaskError, ArchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIMENSION


if __name__ == "__main__":
    sys.exit(main())
