import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bcednet.modelio import (
    MAGIC,
    ChecksumError,
    ModelFormatError,
    TruncatedError,
    VersionError,
    checksum,
    from_bytes,
    load,
    load_arrays,
    load_checkpoint,
    same_network,
    save,
    save_arrays,
    save_checkpoint,
    size_report,
    to_bytes,
)
from bcednet.netgraph import build, default_config, forward, randomize_bn, small_config
from bcednet.trainer import AdaMaxState, TrainParams

M64 = (1 << 64) - 1


def _checksum_oracle(data: bytes) -> int:
    """Plain-integer restatement of the documented checksum."""
    h = 0xCBF29CE484222325
    p = 0x100000001B3
    padded = data + b"\0" * ((-len(data)) % 8)
    for i in range(0, len(padded), 8):
        h = ((h ^ int.from_bytes(padded[i : i + 8], "little")) * p) & M64
    return ((h ^ len(data)) * p) & M64


@given(st.binary(max_size=200))
def test_checksum_matches_oracle(data):
    assert checksum(data) == _checksum_oracle(data)


def test_checksum_frozen_values():
    # frozen from the plain-integer oracle above
    assert checksum(b"") == 0xAF63BD4C8601B7DF
    assert checksum(b"BCED") == 0x56617E0D3BD7BEB3
    assert checksum(bytes(range(20))) == 0x1440CB8AFF1AF511
    assert checksum(b"a") != checksum(b"a\0")  # length is folded in


def test_round_trip_bit_identical(small_net, tmp_path):
    data = to_bytes(small_net)
    back = from_bytes(data)
    assert same_network(small_net, back)
    assert to_bytes(back) == data
    path = tmp_path / "m.bced"
    n = save(small_net, path)
    assert n == len(data) == path.stat().st_size
    assert path.read_bytes() == data
    again = load(path)
    img = np.random.default_rng(2).random((small_net.config.input_h, small_net.config.input_w))
    a, _ = forward(small_net, img, "packed_folded")
    b, _ = forward(again, img, "packed_folded")
    assert np.array_equal(a, b)


def test_header_layout(small_net):
    data = to_bytes(small_net)
    magic, version, kind, length = struct.unpack_from("<4sIIQ", data)
    assert magic == MAGIC and version == 1 and kind == 0 and length == len(data)
    (stored,) = struct.unpack_from("<Q", data, len(data) - 8)
    assert stored == _checksum_oracle(data[:-8])


def test_every_single_byte_corruption_detected(tiny_cfg):
    net = randomize_bn(build(tiny_cfg, 1), 2)
    data = to_bytes(net)
    for i in range(len(data)):
        bad = bytearray(data)
        bad[i] ^= 0x5A
        with pytest.raises(ModelFormatError):
            from_bytes(bytes(bad))


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.integers(1, 255))
def test_payload_corruption_is_checksum_error(seed, flip):
    net = randomize_bn(build(small_config(8, 1, input_h=8, input_w=8), seed), seed)
    data = bytearray(to_bytes(net))
    i = 24 + seed % (len(data) - 24)
    data[i] ^= flip
    with pytest.raises(ChecksumError):
        from_bytes(bytes(data))


def test_truncation_version_and_trailing(small_net):
    data = to_bytes(small_net)
    for cut in (3, 10, len(data) // 2, len(data) - 1):
        with pytest.raises(TruncatedError):
            from_bytes(data[:cut])
    with pytest.raises(ModelFormatError, match="trailing"):
        from_bytes(data + b"\0")
    bumped = bytearray(data)
    struct.pack_into("<I", bumped, 4, 2)
    with pytest.raises(VersionError):
        from_bytes(bytes(bumped))
    with pytest.raises(ModelFormatError, match="magic"):
        from_bytes(b"XXXX" + data[4:])


def test_model_and_checkpoint_kinds_not_confused(small_net, tmp_path):
    params = TrainParams.from_network(small_net)
    state = AdaMaxState.zeros_like(params.trainable())
    save_checkpoint(tmp_path / "c", params, state, 3)
    with pytest.raises(ModelFormatError, match="model"):
        load(tmp_path / "c")
    save(small_net, tmp_path / "m")
    with pytest.raises(ModelFormatError, match="checkpoint"):
        load_checkpoint(tmp_path / "m")


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = small_config(8, 2, input_h=8, input_w=16)
    p = TrainParams.init(cfg, seed=3)
    for k in range(len(p.gamma)):
        p.gamma[k] = rng.normal(size=p.gamma[k].shape)
        p.running_var[k] = rng.random(p.running_var[k].shape) + 0.5
    state = AdaMaxState.zeros_like(p.trainable())
    state.t = 17
    for m, u in zip(state.m, state.u):
        m[...] = rng.normal(size=m.shape)
        u[...] = rng.random(u.shape)
    save_checkpoint(tmp_path / "ck", p, state, 5)
    p2, s2, epoch = load_checkpoint(tmp_path / "ck")
    assert epoch == 5 and s2.t == 17 and s2.beta1 == state.beta1 and s2.beta2 == state.beta2
    for a, b in zip(p.trainable() + p.running_mean + p.running_var, p2.trainable() + p2.running_mean + p2.running_var):
        assert np.array_equal(a, b)
    for a, b in zip(state.m + state.u, s2.m + s2.u):
        assert np.array_equal(a, b)
    assert p2.config == cfg


def test_named_arrays_round_trip(tmp_path, tiny_cfg):
    arrays = {"a": np.arange(6, dtype=np.float64).reshape(2, 3), "empty": np.zeros(0)}
    save_arrays(tmp_path / "x", tiny_cfg, arrays)
    cfg, back = load_arrays(tmp_path / "x")
    assert cfg == tiny_cfg and set(back) == set(arrays)
    assert all(np.array_equal(arrays[k], back[k]) and arrays[k].shape == back[k].shape for k in arrays)


def test_same_seed_models_byte_identical(tiny_cfg, tmp_path):
    a = save(randomize_bn(build(tiny_cfg, 9), 9), tmp_path / "a")
    b = save(randomize_bn(build(tiny_cfg, 9), 9), tmp_path / "b")
    assert a == b and (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_save_is_atomic_on_failure(small_net, tmp_path):
    path = tmp_path / "m"
    save(small_net, path)
    before = path.read_bytes()
    with pytest.raises(Exception):
        save(small_net, tmp_path / "missing_dir" / "m")
    assert path.read_bytes() == before
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m"]


# ---------------------------------------------------------------------------
# memory accounting


def test_default_size_report():
    r = size_report(default_config())
    assert r.binary_param_count == 17_085_952
    assert r.binary_packed_bytes == 2_135_744
    assert r.real_param_count == 576 and r.real_bytes == 4_608
    assert r.bn_param_count == 18_796 and r.bn_param_bytes == 150_368
    assert r.total_bytes == 2_290_720
    assert r.hypothetical_fp32_bytes == 68_421_296
    assert r.reduction_ratio == pytest.approx(1 - 2_290_720 / 68_421_296)
    assert abs(r.binary_packed_bytes - 2.14e6) / 2.14e6 <= 0.005
    assert r.reduction_ratio >= 0.96
    assert abs(r.hypothetical_fp32_bytes / 1e6 - 66.12) / 66.12 <= 0.05


def test_size_report_network_matches_config(tiny_cfg):
    net = build(tiny_cfg, 0)
    assert size_report(net) == size_report(tiny_cfg)
    # packed payload is whole 64-bit words per filter row of channels
    r = size_report(tiny_cfg)
    assert r.binary_packed_bytes % 8 == 0
