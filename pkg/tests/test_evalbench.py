import numpy as np
import pytest
from hypothesis import given, strategies as st

from bcednet.evalbench import (
    BenchResult,
    OutputMismatch,
    bench_forward,
    evaluate,
    op_counts,
    pixel_accuracy,
)
from bcednet.netgraph import build, default_config, forward, parse_config, predict_labels, randomize_bn, small_config


def test_accuracy_identity_and_background_case():
    truth = np.zeros((32, 128), dtype=np.uint8)
    truth.flat[: int(0.3 * truth.size)] = 7
    assert pixel_accuracy(truth, truth).pixel_accuracy == 1.0
    res = pixel_accuracy(np.zeros_like(truth), truth)
    assert res.pixel_accuracy == pytest.approx(0.70, abs=1 / truth.size)
    assert res.ink_accuracy == 0.0
    assert res.total == truth.size


@given(st.integers(0, 2**32 - 1))
def test_accuracy_matches_scan(seed):
    r = np.random.default_rng(seed)
    truth = r.integers(0, 27, (3, 6, 9))
    pred = np.where(r.random(truth.shape) < 0.5, truth, r.integers(0, 27, truth.shape))
    res = pixel_accuracy(pred, truth)
    hits = sum(int(p == t) for p, t in zip(pred.ravel(), truth.ravel()))
    assert res.pixel_accuracy == hits / truth.size
    conf = np.zeros((27, 27), int)
    for p, t in zip(pred.ravel(), truth.ravel()):
        conf[t, p] += 1
    assert np.array_equal(res.confusion, conf)
    assert res.pixel_accuracy == np.trace(res.confusion) / res.total
    perm = r.permutation(27)
    assert pixel_accuracy(perm[pred], perm[truth]).pixel_accuracy == res.pixel_accuracy


def test_accuracy_errors():
    with pytest.raises(ValueError):
        pixel_accuracy(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        pixel_accuracy(np.full((2, 2), 27), np.zeros((2, 2)))


def test_per_class_recall():
    truth = np.array([[0, 0, 1, 1]])
    pred = np.array([[0, 1, 1, 1]])
    res = pixel_accuracy(pred, truth)
    assert res.per_class[0] == 0.5 and res.per_class[1] == 1.0 and np.isnan(res.per_class[2])


def test_op_counts_default():
    ops = op_counts(default_config())
    assert ops[8] == 32 * 128 * 3 * 3 * 512 * 512 == 9_663_676_416
    assert ops[9] == 32 * 128 * 512 * 512 == 1_073_741_824
    assert int(np.argmax(ops)) == 8
    assert ops[0] == 32 * 128 * 9 * 64
    assert ops[1] == 32 * 128 * 9 * 64 * 512  # convolution runs before the pool


def test_op_counts_trivial():
    cfg = parse_config("input 1 1\nadapter 1x1 1\nclassifier_softmax 1x1 27")
    assert op_counts(cfg)[0] == 1
    assert op_counts(cfg)[1] == 27


def test_evaluate_matches_forward(small_net, rng):
    cfg = small_net.config
    imgs = rng.random((4, cfg.input_h, cfg.input_w))
    labels = rng.integers(0, 27, (4, cfg.input_h, cfg.input_w))
    res = evaluate(small_net, imgs, labels, batch=3)
    pred = np.stack([predict_labels(forward(small_net, im)[0]) for im in imgs])
    assert res.pixel_accuracy == np.mean(pred == labels)


def test_bench_smoke(small_net):
    res = bench_forward(small_net, batch_size=4, repetitions=3, warmup=1)
    assert isinstance(res, BenchResult)
    assert res.batch_size == 4 and res.repetitions == 3 and len(res.real_runs) == 3
    assert len(res.blocks) == len(small_net.config.blocks)
    assert res.speedup == res.real_ns / res.packed_ns
    assert res.blocks[res.heaviest_block].ops == max(b.ops for b in res.blocks)
    lines = res.csv().splitlines()
    assert lines[0] == "block,path,ops,ns_per_image,speedup"
    assert len(lines) == 1 + 2 * len(res.blocks) + 2
    assert "published" in res.table()


def test_bench_validates_arguments(small_net):
    with pytest.raises(ValueError):
        bench_forward(small_net, repetitions=2)
    with pytest.raises(ValueError):
        bench_forward(small_net, warmup=0)


def test_bench_refuses_disagreeing_paths(small_net, monkeypatch):
    import bcednet.evalbench as eb

    real_fn = eb.forward_logits_batch

    def broken(net, images, mode, timer=None):
        out = real_fn(net, images, mode, timer)
        return -out if mode == "packed_folded" else out

    monkeypatch.setattr(eb, "forward_logits_batch", broken)
    with pytest.raises(OutputMismatch):
        bench_forward(small_net, batch_size=2, repetitions=3)


def test_bench_rejects_stale_thresholds(small_net):
    from bcednet.netgraph import StaleThresholdError, with_bn

    bns = [layer.bn.copy() for layer in small_net.layers]
    bns[3].beta += 1.0
    with pytest.raises(StaleThresholdError):
        bench_forward(with_bn(small_net, bns, refold=False), batch_size=2, repetitions=3)


def test_bench_timing_monotone_and_stable():
    net = randomize_bn(build(small_config(64, 3, input_h=32, input_w=64), 0), 1)
    small = bench_forward(net, batch_size=2, repetitions=5)
    large = bench_forward(net, batch_size=8, repetitions=5)
    again = bench_forward(net, batch_size=8, repetitions=5)
    assert np.median(large.packed_runs) > np.median(small.packed_runs)
    assert np.median(large.real_runs) > np.median(small.real_runs)
    for a, b in ((large.packed_ns, again.packed_ns), (large.real_ns, again.real_ns)):
        assert abs(a - b) / max(a, b) <= 0.25
