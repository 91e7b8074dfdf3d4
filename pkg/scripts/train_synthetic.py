"""Desk-scale training runs on rendered text.

    python scripts/train_synthetic.py overfit   # 20 samples, train accuracy
    python scripts/train_synthetic.py heldout   # 2,000 train / 200 held-out

Both modes train a reduced network (``small_config``) with the binary
trainer and report pixel accuracy next to the all-background baseline.
Defaults are the settings used by the acceptance tests.
"""

import argparse
import time

import numpy as np

from bcednet import modelio
from bcednet.evalbench import evaluate
from bcednet.netgraph import small_config
from bcednet.textgen import PRESETS, render_arrays
from bcednet.trainer import TrainConfig, TrainParams, fit

MODES = {
    # mode: (train count, held-out count, epochs, batch size, recalibration images)
    "overfit": (20, 0, 200, 4, 20),
    "heldout": (2000, 200, 30, 20, 200),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("mode", choices=sorted(MODES))
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--batch-size", type=int)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--lr-decay", type=float, default=1.0)
    ap.add_argument("--width", type=int, default=32)
    ap.add_argument("--pools", type=int, default=4)
    ap.add_argument("--preset", default="high-contrast", choices=sorted(PRESETS))
    ap.add_argument("--recalibrate", type=int, help="images for BN re-estimation after each epoch (0 = off)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-model")
    args = ap.parse_args()

    n_train, n_val, epochs, bs, recal = MODES[args.mode]
    epochs = args.epochs or epochs
    bs = args.batch_size or bs
    recal = recal if args.recalibrate is None else args.recalibrate
    params = PRESETS[args.preset]
    train = render_arrays(n_train, args.seed, params)
    # held-out seeds start well past the training range
    val = render_arrays(n_val, args.seed + 1_000_000, params) if n_val else train
    baseline = float((val[1] == 0).mean())
    print(f"{args.mode}: {n_train} train, {len(val[0])} eval samples, background baseline {baseline:.4f}")

    p = TrainParams.init(small_config(args.width, args.pools), args.seed)
    cfg = TrainConfig(batch_size=bs, lr=args.lr, lr_decay=args.lr_decay, recalibrate=recal)
    t0 = time.perf_counter()

    def report(rec):
        print(f"epoch {rec.epoch:3d}  loss {rec.loss:.4f}  acc {rec.val_accuracy:.4f}  "
              f"{time.perf_counter() - t0:.0f}s", flush=True)

    res = fit(p, train, val, epochs, args.seed, cfg, on_epoch=report)
    acc = evaluate(res.network, *val)
    print(f"pixel accuracy {acc.pixel_accuracy:.4f} (ink {acc.ink_accuracy:.4f}), "
          f"baseline {baseline:.4f}, margin {100 * (acc.pixel_accuracy - baseline):+.1f} pp")
    if args.out_model:
        modelio.save(res.network, args.out_model)


if __name__ == "__main__":
    main()
