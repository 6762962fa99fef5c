"""Command-line entry point ``moc``.

Exit codes: 0 success, 2 usage, 3 numeric failure, 4 I/O or format error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, ConfigError, FormatError, NumericError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    """Bad flags or flag values detected after argparse."""


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 16 or w < 16 or h % 16 or w % 16:
        raise argparse.ArgumentTypeError(f"size {h}x{w} must be a positive multiple of 16 in both extents")
    return h, w


def _lam(text: str):
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"lambda must be a number or comma list, got {text!r}") from None
    if any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("lambda must be >= 0")
    return values[0] if len(values) == 1 else values


def _threads() -> int:
    raw = os.environ.get("MOC_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MOC_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("MOC_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    from .data import INDEX_NAME, synth_generate

    h, w = args.size
    synth_generate(args.seed, args.n, h, w, args.categories, args.out, lam=args.lam, split=args.split)
    print(Path(args.out) / INDEX_NAME)
    return EXIT_OK


def _model_config(args, k: int):
    from .model import ModelConfig

    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise FormatError(f"{args.config}: config must be a JSON object")
    for key in ("ablation", "base_channels", "state_size"):
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    if doc.setdefault("num_categories", k) != k:
        raise CompatibilityError(f"config has {doc['num_categories']} categories, dataset has {k}")
    return ModelConfig.from_dict(doc)


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import load_dataset, load_index
    from .model import MambaMOC
    from .optim import AdamW
    from .training import fit

    if args.epochs < 0 or args.batch < 1:
        raise UsageError("need --epochs >= 0 and --batch >= 1")
    index = load_index(args.data)
    cfg = _model_config(args, index.k)
    images, gts, _ = load_dataset(index)
    model = MambaMOC(cfg, np.random.default_rng(args.seed))
    opt = AdamW(model.parameters(), lr=args.lr, weight_decay=args.wd)
    print("epoch,loss", flush=True)
    fit(model, images, gts, args.epochs, args.batch, seed=args.seed, optimizer=opt,
        on_epoch=lambda e, loss: print(f"{e + 1},{loss:.8g}", flush=True))
    save_checkpoint(args.out, model, opt if args.save_optimizer else None)
    return EXIT_OK


def _eval_weights(args, k: int):
    from .counting import check_weights, uniform_weights

    if args.uniform or (args.weights is None and k == 1):
        return uniform_weights(k)
    if args.weights is None:
        raise UsageError("--weights FILE or --uniform is required when K > 1")
    try:
        doc = json.loads(Path(args.weights).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{args.weights}: invalid JSON ({exc})") from None
    if isinstance(doc, dict):
        doc = doc.get("weights")
    try:
        return check_weights(doc, k)
    except (ShapeError, ValueError, TypeError) as exc:
        raise UsageError(f"{args.weights}: {exc}") from None


def cmd_eval(args) -> int:
    from .autograd import no_grad
    from .checkpoint import model_from_checkpoint
    from .counting import MetricReport
    from .data import load_dataset, load_index
    from .training import predict_counts

    model, _ = model_from_checkpoint(args.ckpt)
    index = load_index(args.data)
    k = model.config.num_categories
    if index.k != k:
        raise CompatibilityError(f"checkpoint predicts {k} categories, dataset has {index.k}")
    weights = _eval_weights(args, k)
    images, _, counts = load_dataset(index)
    # the model is read-only here, so image chunks can be scored concurrently
    chunks = np.array_split(np.arange(len(images)), min(_threads(), len(images)))
    with no_grad(), ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        preds = list(pool.map(lambda idx: predict_counts(model, images[idx]), chunks))
    report = MetricReport.from_counts(np.concatenate(preds), counts, weights, args.convention)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_predict(args) -> int:
    from .autograd import Tensor, no_grad
    from .checkpoint import model_from_checkpoint
    from .data import load_image, save_pgm

    model, _ = model_from_checkpoint(args.ckpt)
    image = load_image(args.image)
    h, w, _ = image.shape
    if h % 16 or w % 16:
        raise ShapeError(f"image extents {h}x{w} must be divisible by 16")
    with no_grad():
        density = model(Tensor(image)).density.data.astype(np.float64)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = density.sum(axis=(0, 1))
    scales = []
    for c in range(density.shape[-1]):
        ch = density[..., c]
        lo, hi = float(ch.min()), float(ch.max())
        span = hi - lo
        scaled = (ch - lo) / span if span > 0 else np.zeros_like(ch)
        name = f"density_{c}.pgm"
        save_pgm(out / name, scaled)
        scales.append({"category": c, "file": name, "min": lo, "max": hi})
    sidecar = {"image": str(args.image), "stride": 4, "shape": list(density.shape), "channels": scales}
    (out / "density.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    lines = ["category,count"] + [f"{c},{v:.8g}" for c, v in enumerate(counts)]
    (out / "counts.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    """Run a few fast property checks and print one line per check."""
    from .autograd import Tensor
    from .counting import PointAnnotation, gt_density, mse_bar
    from .ssm import DiscreteSsm, discretize, kernel_conv, scan_parallel, scan_recurrent

    rng = np.random.default_rng(args.seed)
    results = []
    a_bar, b_bar = discretize(np.array([-1.0]), np.array([2.0]), np.log(2.0))
    results.append(("discretization", abs(a_bar[0] - 0.5) < 1e-9 and abs(b_bar[0] - 1.0) < 1e-9))
    worst = 0.0
    for _ in range(20):
        n, length = int(rng.integers(1, 9)), int(rng.integers(1, 65))
        a = -rng.uniform(0.1, 2.0, n)
        ssm = DiscreteSsm.from_continuous(a[None], rng.normal(size=n), rng.normal(size=n), rng.uniform(0.01, 0.5), length)
        x = rng.normal(size=length)
        ys = [kernel_conv(ssm, x), scan_recurrent(ssm, x), scan_parallel(ssm, x)]
        worst = max(worst, float(np.max(np.abs(ys[0] - ys[1]))), float(np.max(np.abs(ys[0] - ys[2]))))
    results.append(("scan equivalence", worst < 1e-5))
    pts = [PointAnnotation(float(rng.uniform(0, 32)), float(rng.uniform(0, 32)), int(rng.integers(0, 2)))
           for _ in range(10)]
    mass = gt_density(pts, 32, 32, 2).sum(axis=(0, 1))
    expected = np.bincount([p.category for p in pts], minlength=2)
    results.append(("density conservation", bool(np.all(np.abs(mass - expected) < 1e-3))))
    anchor = mse_bar([4.0277, 10.5133, 6.4310, 5.5722, 30.4554, 0.4768])
    results.append(("metric anchor", abs(anchor - 9.5794) < 5e-5))
    from .model import MambaMOC, ModelConfig
    m = MambaMOC(ModelConfig(base_channels=4, state_size=2, num_categories=2, depths=(1, 1, 1)), 0)
    out = m(Tensor(rng.uniform(size=(1, 32, 32, 3))))
    results.append(("model forward", out.density.shape == (1, 8, 8, 2) and bool(np.all(out.density.data >= 0))))
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK if all(ok for _, ok in results) else EXIT_NUMERIC


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moc", description="Multi-category object counting with state space models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=_size, default=(64, 64), help="HxW, multiples of 16")
    p.add_argument("--categories", type=int, default=3)
    p.add_argument("--lambda", dest="lam", type=_lam, default=3.0, help="Poisson rate, or one per category")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON file mirroring ModelConfig")
    p.add_argument("--ablation", choices=("baseline", "cim", "full"))
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--state-size", dest="state_size", type=int)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--wd", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-optimizer", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print per-category metrics as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", help="JSON list (or {\"weights\": [...]}) of K category weights")
    p.add_argument("--uniform", action="store_true", help="use uniform category weights")
    p.add_argument("--convention", choices=("mean-of-squares", "linear"), default="mean-of-squares")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write density maps and counts for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("selfcheck", help="run quick property checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"moc {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"moc {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, CompatibilityError, ShapeError) as exc:
        print(f"moc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
