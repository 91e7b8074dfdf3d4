"""Command-line entry point: render, train, infer, eval, bench, inspect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "BCED_THREADS"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _pair(kind):
    def parse(text):
        lo, hi = (kind(v) for v in text.split(","))
        return lo, hi

    return parse


def resolve_config(text: str):
    """'default', 'small[:WIDTH[:POOLS]]' or a path to a config file."""
    from .netgraph import default_config, load_config, small_config

    if text == "default":
        return default_config()
    if text == "small" or text.startswith("small:"):
        try:
            parts = [int(p) for p in text.split(":")[1:]]
        except ValueError:
            parts = None
        if parts is None or len(parts) > 2:
            raise UsageError(f"bad config shorthand {text!r}; use small:WIDTH:POOLS")
        return small_config(*parts)
    path = Path(text)
    if not path.is_file():
        raise DataError(f"config file {text} not found")
    return load_config(path)


# ---------------------------------------------------------------------------


def cmd_render(args) -> int:
    from dataclasses import replace

    from .textgen import PRESETS, render_dataset

    if args.count < 1:
        raise UsageError("--count must be at least 1")
    overrides = {
        k: v
        for k, v in dict(
            cap_height=args.cap_height,
            length=args.length,
            max_rotation_deg=args.max_rotation,
            max_shear=args.max_shear,
            max_corner_shift=args.max_corner_shift,
            noise_sigma=args.noise,
            char_jitter=args.jitter,
            min_contrast=args.min_contrast,
        ).items()
        if v is not None
    }
    try:
        params = replace(PRESETS[args.preset], **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        m = render_dataset(args.count, args.seed, params, args.out)
    except OSError as exc:
        raise DataError(f"cannot write dataset: {exc}") from None
    ink = sum(m.histogram[1:]) / max(sum(m.histogram), 1)
    print(f"wrote {m.count} samples to {args.out} (seed {m.seed}, ink fraction {ink:.3f})")
    return EXIT_OK


def _load_data(path):
    from .textgen import load_dataset

    try:
        return load_dataset(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None


def cmd_train(args) -> int:
    from . import modelio
    from .trainer import TrainConfig, TrainParams, fit

    train = _load_data(args.data)
    val = _load_data(args.val) if args.val else None
    tcfg = TrainConfig(batch_size=args.batch_size, lr=args.lr, lr_decay=args.lr_decay, recalibrate=args.recalibrate)
    state, start = None, 0
    if args.resume:
        try:
            params, state, start = modelio.load_checkpoint(args.resume)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot resume from {args.resume}: {exc}") from None
    else:
        params = TrainParams.init(resolve_config(args.config), args.seed)
    cfg = params.config
    if train[0].shape[1:] != (cfg.input_h, cfg.input_w):
        raise DataError(f"dataset images are {train[0].shape[1:]}, config expects {(cfg.input_h, cfg.input_w)}")

    def report(rec):
        acc = "-" if rec.val_accuracy is None else f"{rec.val_accuracy:.4f}"
        print(f"epoch {rec.epoch:3d}  loss {rec.loss:.4f}  val_acc {acc}  lr {rec.lr:.6f}  {rec.seconds:.1f}s", flush=True)

    result = fit(params, train, val, args.epochs, args.seed, tcfg, state, start, on_epoch=report)
    n = modelio.save(result.network, args.out_model)
    print(f"saved {args.out_model} ({n} bytes)")
    if args.checkpoint:
        modelio.save_checkpoint(args.checkpoint, result.params, result.state, result.epochs_done)
        print(f"checkpoint {args.checkpoint} at epoch {result.epochs_done}")
    return EXIT_OK


def _load_model(path):
    from . import modelio

    try:
        return modelio.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load model {path}: {exc}") from None


def cmd_infer(args) -> int:
    from .netgraph import forward, predict_labels
    from .pgm import encode_pgm, read_pgm, to_gray8

    net = _load_model(args.model)
    try:
        img = read_pgm(args.image).astype(np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {args.image}: {exc}") from None
    cfg = net.config
    if img.shape != (cfg.input_h, cfg.input_w):
        raise DataError(f"image is {img.shape[1]}x{img.shape[0]}, model expects {cfg.input_w}x{cfg.input_h}")
    probs, _ = forward(net, img, args.mode)
    labels = predict_labels(probs)
    files = {f"class_{c:02d}.pgm": encode_pgm(to_gray8(probs[..., c])) for c in range(cfg.num_classes)}
    files["labels.pgm"] = encode_pgm((labels.astype(np.uint16) * 9).clip(0, 255).astype(np.uint8))
    out = Path(args.out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        for name, data in files.items():
            (tmp / name).write_bytes(data)
        if out.exists():
            for name in files:
                os.replace(tmp / name, out / name)
            tmp.rmdir()
        else:
            os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {len(files)} maps to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalbench import evaluate

    net = _load_model(args.model)
    images, labels = _load_data(args.data)
    res = evaluate(net, images, labels, args.mode)
    if args.csv:
        print("class,pixels,accuracy")
        for c, (n, a) in enumerate(zip(res.confusion.sum(axis=1), res.per_class)):
            print(f"{c},{n},{'' if np.isnan(a) else f'{a:.6f}'}")
        print(f"all,{res.total},{res.pixel_accuracy:.6f}")
        print(f"ink,{res.total - res.confusion[0].sum()},{res.ink_accuracy:.6f}")
    else:
        print(f"pixel accuracy  {res.pixel_accuracy:.4f}  ({res.total} pixels)")
        print(f"ink accuracy    {res.ink_accuracy:.4f}")
        bg = res.confusion[0].sum() / res.total
        print(f"background-only baseline {bg:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .evalbench import bench_forward

    if args.model:
        net = _load_model(args.model)
    else:
        from .netgraph import build, randomize_bn

        net = randomize_bn(build(resolve_config(args.config), args.seed), args.seed + 1)
    try:
        res = bench_forward(net, args.batch, args.reps, args.warmup, seed=args.seed, threads=args.threads)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(res.table())
    if args.csv:
        _write_text(args.csv, res.csv())
        print(f"csv written to {args.csv}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .modelio import size_report
    from .netgraph import format_config

    if args.model:
        net = _load_model(args.model)
        cfg = net.config
    else:
        cfg = resolve_config(args.config)
    print(format_config(cfg), end="")
    print("\n".join(size_report(cfg).lines()))
    return EXIT_OK


def _write_text(path, text: str):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    env = os.environ.get(THREADS_ENV)
    p = _Parser(prog="bcednet", description="Binary convolutional encoder-decoder toolkit")
    p.add_argument("--threads", type=int, default=int(env) if env else None,
                   help=f"execution contexts for kernels and BLAS (default: ${THREADS_ENV} or all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("render", help="write a synthetic dataset")
    r.add_argument("--count", type=int, required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--preset", default="default", choices=["default", "high-contrast"],
                   help="starting render ranges; the options below override single fields")
    r.add_argument("--cap-height", type=_pair(float), metavar="MIN,MAX")
    r.add_argument("--length", type=_pair(int), metavar="MIN,MAX")
    r.add_argument("--max-rotation", type=float, metavar="DEG")
    r.add_argument("--max-shear", type=float)
    r.add_argument("--max-corner-shift", type=float, metavar="PX")
    r.add_argument("--noise", type=float, metavar="SIGMA")
    r.add_argument("--jitter", type=float)
    r.add_argument("--min-contrast", type=float)
    r.set_defaults(func=cmd_render)

    t = sub.add_parser("train", help="train a network and save it")
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--config", default="small", help="'default', 'small[:W[:POOLS]]' or a config file")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=0.002)
    t.add_argument("--lr-decay", type=float, default=0.9, help="lr multiplier applied after every epoch")
    t.add_argument("--batch-size", type=int, default=20)
    t.add_argument("--recalibrate", type=int, default=0, metavar="N",
                   help="re-estimate BN statistics on the first N training images (0 = momentum average only)")
    t.add_argument("--out-model", required=True)
    t.add_argument("--checkpoint", help="also write a resumable latent-weight checkpoint here")
    t.add_argument("--resume", help="continue from a checkpoint (ignores --config)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="salience maps for one PGM image")
    i.add_argument("--model", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out-dir", required=True)
    i.add_argument("--mode", default="packed_folded", choices=["real", "packed_unfolded", "packed_folded"])
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="pixel accuracy on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", default="packed_folded", choices=["real", "packed_unfolded", "packed_folded"])
    e.add_argument("--csv", action="store_true", help="per-class CSV instead of the summary")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time real vs packed inference per block")
    b.add_argument("--model", help="model file; without it a random network of --config is used")
    b.add_argument("--config", default="default")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--batch", type=int, default=16)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--csv", metavar="PATH", help="write block,path,ops,ns_per_image,speedup rows")
    b.set_defaults(func=cmd_bench)

    n = sub.add_parser("inspect", help="config echo and size report")
    n.add_argument("--model")
    n.add_argument("--config", default="default")
    n.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    from .modelio import ModelFormatError
    from .netgraph import ConfigError
    from .trainer import NonFiniteGradient

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.threads is not None and args.command != "bench":
            from .evalbench import pinned_threads

            with pinned_threads(args.threads):
                return args.func(args)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteGradient, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ModelFormatError, ConfigError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
