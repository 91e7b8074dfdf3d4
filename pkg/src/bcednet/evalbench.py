"""Pixel-accuracy evaluation and the block-wise run-time benchmark."""

from __future__ import annotations

import csv
import io
import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numba
import numpy as np
from threadpoolctl import threadpool_limits

from .netgraph import NetConfig, Network, _Timer, forward_logits_batch, predict_labels

# reported next to the desk figures for context only
PUBLISHED_GPU_MS = 4.59
PUBLISHED_SPEEDUP = 8.0
PUBLISHED_BLOCK8_SPEEDUP = 17.7


@dataclass(frozen=True)
class AccuracyResult:
    pixel_accuracy: float
    per_class: np.ndarray  # recall per true class, nan where the class is absent
    confusion: np.ndarray  # (classes, classes) counts, rows = truth
    ink_accuracy: float  # accuracy over pixels whose true class is not background

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def pixel_accuracy(pred, truth, num_classes: int = 27) -> AccuracyResult:
    """Exact counting over congruent label maps (any leading batch shape)."""
    pred = np.asarray(pred).astype(np.int64)
    truth = np.asarray(truth).astype(np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    for name, arr in (("prediction", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels outside 0..{num_classes - 1}")
    conf = np.bincount(truth.ravel() * num_classes + pred.ravel(), minlength=num_classes**2)
    conf = conf.reshape(num_classes, num_classes)
    rows = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.diag(conf) / rows
    ink = rows[1:].sum()
    ink_acc = float(np.trace(conf[1:, 1:]) / ink) if ink else float("nan")
    total = conf.sum()
    acc = float(np.trace(conf) / total) if total else float("nan")
    return AccuracyResult(acc, per_class, conf, ink_acc)


def evaluate(net: Network, images, labels, mode: str = "packed_folded", batch: int = 50) -> AccuracyResult:
    preds = [
        predict_labels(forward_logits_batch(net, images[i : i + batch], mode)) for i in range(0, len(images), batch)
    ]
    return pixel_accuracy(np.concatenate(preds), labels, net.config.num_classes)


def op_counts(config: NetConfig) -> list[int]:
    """Accumulates per block: conv_H * conv_W * kh * kw * in * out (exact integers)."""
    out = []
    for k, (b, (h, w)) in enumerate(zip(config.blocks, config.conv_shapes())):
        out.append(h * w * b.kernel_h * b.kernel_w * config.in_channels(k) * b.out_channels)
    return out


# ---------------------------------------------------------------------------
# benchmark


@contextmanager
def pinned_threads(threads: int | None):
    """Limit numba and BLAS to ``threads`` contexts (None keeps the defaults)."""
    if threads is None:
        yield numba.get_num_threads()
        return
    threads = max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS))
    before = numba.get_num_threads()
    numba.set_num_threads(threads)
    try:
        with threadpool_limits(limits=threads):
            yield threads
    finally:
        numba.set_num_threads(before)


@dataclass(frozen=True)
class BlockTiming:
    block: int
    ops: int
    real_ns: float  # per image
    packed_ns: float

    @property
    def speedup(self) -> float:
        return self.real_ns / self.packed_ns if self.packed_ns > 0 else float("inf")


@dataclass(frozen=True)
class BenchResult:
    batch_size: int
    repetitions: int
    threads: int
    blocks: tuple[BlockTiming, ...]
    real_ns: float  # whole network, per image, median
    packed_ns: float
    real_runs: tuple[float, ...]  # per-repetition totals (seconds per batch)
    packed_runs: tuple[float, ...]

    @property
    def speedup(self) -> float:
        return self.real_ns / self.packed_ns

    @property
    def heaviest_block(self) -> int:
        return max(self.blocks, key=lambda b: b.ops).block

    def table(self) -> str:
        lines = [
            f"batch {self.batch_size}, {self.repetitions} repetitions (median), {self.threads} thread(s)",
            f"{'block':>5} {'ops':>15} {'real ms/img':>12} {'packed ms/img':>14} {'speedup':>8}",
        ]
        for b in self.blocks:
            lines.append(f"{b.block:>5} {b.ops:>15,d} {b.real_ns / 1e6:>12.3f} {b.packed_ns / 1e6:>14.3f} {b.speedup:>7.2f}x")
        total_ops = sum(b.ops for b in self.blocks)
        lines.append(
            f"{'all':>5} {total_ops:>15,d} {self.real_ns / 1e6:>12.3f} {self.packed_ns / 1e6:>14.3f} {self.speedup:>7.2f}x"
        )
        lines.append(
            f"published (GPU, for context): {PUBLISHED_GPU_MS} ms/img, {PUBLISHED_SPEEDUP:g}x overall, "
            f"{PUBLISHED_BLOCK8_SPEEDUP:g}x on block 8"
        )
        return "\n".join(lines)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "path", "ops", "ns_per_image", "speedup"])
        for b in self.blocks:
            w.writerow([b.block, "real", b.ops, f"{b.real_ns:.0f}", "1.000"])
            w.writerow([b.block, "packed", b.ops, f"{b.packed_ns:.0f}", f"{b.speedup:.3f}"])
        total = sum(b.ops for b in self.blocks)
        w.writerow(["all", "real", total, f"{self.real_ns:.0f}", "1.000"])
        w.writerow(["all", "packed", total, f"{self.packed_ns:.0f}", f"{self.speedup:.3f}"])
        return buf.getvalue()


class OutputMismatch(AssertionError):
    pass


def _time(net, imgs, mode, reps, warmup):
    n_blocks = len(net.config.blocks)
    for _ in range(warmup):
        forward_logits_batch(net, imgs, mode)
    totals, per_block = [], []
    for _ in range(reps):
        timer = _Timer(n_blocks)
        t0 = time.perf_counter()
        forward_logits_batch(net, imgs, mode, timer)
        totals.append(time.perf_counter() - t0)
        per_block.append(timer.seconds.copy())
    return totals, np.median(np.stack(per_block), axis=0)


def bench_forward(
    net: Network,
    batch_size: int = 16,
    repetitions: int = 5,
    warmup: int = 1,
    images=None,
    seed: int = 0,
    threads: int | None = None,
) -> BenchResult:
    """Median-of-repetitions timing of the real baseline and the packed folded path.

    Both paths first run once on the benchmark batch and must produce the same
    label maps; otherwise ``OutputMismatch`` is raised and nothing is timed.
    """
    if repetitions < 3:
        raise ValueError("at least 3 repetitions are needed for a median")
    if warmup < 1:
        raise ValueError("at least one warm-up run is needed")
    cfg = net.config
    if images is None:
        images = np.random.default_rng(seed).random((batch_size, cfg.input_h, cfg.input_w))
    images = np.asarray(images)[:batch_size]
    with pinned_threads(threads) as used:
        real = predict_labels(forward_logits_batch(net, images, "real"))
        packed = predict_labels(forward_logits_batch(net, images, "packed_folded"))
        if not np.array_equal(real, packed):
            raise OutputMismatch("packed and real paths disagree on the benchmark batch")
        real_runs, real_blocks = _time(net, images, "real", repetitions, warmup - 1)
        packed_runs, packed_blocks = _time(net, images, "packed_folded", repetitions, warmup - 1)
    n = len(images)
    ops = op_counts(cfg)
    blocks = tuple(
        BlockTiming(k, ops[k], 1e9 * real_blocks[k] / n, 1e9 * packed_blocks[k] / n) for k in range(len(cfg.blocks))
    )
    return BenchResult(
        n,
        repetitions,
        used,
        blocks,
        1e9 * statistics.median(real_runs) / n,
        1e9 * statistics.median(packed_runs) / n,
        tuple(real_runs),
        tuple(packed_runs),
    )
