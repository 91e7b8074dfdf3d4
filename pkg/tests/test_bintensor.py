import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from bcednet.bintensor import (
    BitTensor,
    pack,
    pack_bits,
    padding_mask,
    to_pm,
    unpack,
    unpack_bits,
    words_per_pixel,
    xnor_popcount_dot,
)


def bit_tensors(max_side=5, max_c=140):
    shape = st.tuples(st.integers(1, max_side), st.integers(1, max_side), st.integers(1, max_c))
    return shape.flatmap(lambda s: hnp.arrays(np.uint8, s, elements=st.integers(0, 1)))


def test_pack_three_channels_sets_bits_0_and_2():
    b = pack(np.array([[[1, 0, 1]]]))
    assert b.words.shape == (1, 1, 1)
    assert int(b.words[0, 0, 0]) == 0b101


def test_pack_all_zero_64_channels():
    b = pack(np.zeros((2, 2, 64)))
    assert b.words.shape == (2, 2, 1)
    assert not b.words.any()


def test_word_boundary_channel_65():
    t = np.zeros((1, 1, 66))
    t[0, 0, 65] = 1
    b = pack(t)
    assert b.words.shape == (1, 1, 2)
    assert int(b.words[0, 0, 0]) == 0
    assert int(b.words[0, 0, 1]) == 2  # bit 1 of the second word
    back = unpack(b)
    assert back[0, 0, 65] == 1 and back.sum() == 1


def test_round_trip_4x4x100(rng):
    t = rng.integers(0, 2, (4, 4, 100)).astype(np.float64)
    assert np.array_equal(unpack(pack(t)), t)


def test_round_trip_3x5x7(rng):
    t = rng.integers(0, 2, (3, 5, 7))
    assert np.array_equal(unpack(pack(t)), t)


@given(bit_tensors())
def test_pack_unpack_bijection(t):
    b = pack(t)
    assert np.array_equal(unpack(b), t)
    assert b.words.shape == (*t.shape[:2], words_per_pixel(t.shape[2]))
    # padding bits are clear
    assert not np.any(b.words & ~padding_mask(t.shape[2]))
    for y, x, c in [(0, 0, 0), (t.shape[0] - 1, t.shape[1] - 1, t.shape[2] - 1)]:
        assert b.bit(y, x, c) == t[y, x, c]


def test_pack_matches_manual_bit_oracle(rng):
    t = rng.integers(0, 2, (2, 3, 130))
    b = pack(t)
    for y in range(2):
        for x in range(3):
            for w in range(3):
                expect = sum(int(t[y, x, c]) << (c - 64 * w) for c in range(64 * w, min(64 * w + 64, 130)))
                assert int(b.words[y, x, w]) == expect


def test_pack_rejects_non_binary():
    with pytest.raises(ValueError):
        pack(np.array([[[0, 2]]]))
    with pytest.raises(ValueError):
        pack(np.array([[[0.5]]]))
    with pytest.raises(ValueError):
        pack(np.zeros((2, 2)))


def test_bittensor_rejects_dirty_padding():
    w = np.zeros((1, 1, 1), dtype=np.uint64)
    w[0, 0, 0] = np.uint64(1 << 10)
    with pytest.raises(ValueError):
        BitTensor(1, 1, 5, w)
    with pytest.raises(ValueError):
        BitTensor(0, 1, 5, np.zeros((0, 1, 1), dtype=np.uint64))


def test_bittensor_words_are_read_only():
    b = pack(np.ones((1, 1, 3)))
    with pytest.raises(ValueError):
        b.words[0, 0, 0] = 0


def test_to_pm_definition():
    assert np.array_equal(to_pm(pack(np.array([[[1, 0, 1]]]))).ravel(), [1, -1, 1])
    assert np.all(to_pm(pack(np.zeros((2, 3, 4)))) == -1)


@given(bit_tensors(max_c=70))
def test_to_pm_affine_identity(t):
    b = pack(t)
    assert np.array_equal(to_pm(b), 2 * unpack(b) - 1)


def test_popcount_identical_nine_bits():
    a = pack_bits(np.ones(9, dtype=np.uint8))
    assert xnor_popcount_dot(a, a, 9) == 9


def test_popcount_hand_enumerated():
    a = pack_bits(np.array([1, 0, 1], dtype=np.uint8))
    w = pack_bits(np.array([1, 1, 0], dtype=np.uint8))
    assert xnor_popcount_dot(a, w, 3) == 1


def test_popcount_ignores_padding_positions():
    # two all-zero 3-bit strings agree at 3 positions, not 64
    z = np.zeros(1, dtype=np.uint64)
    assert xnor_popcount_dot(z, z, 3) == 3


@given(st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_popcount_equals_pm_dot(n, seed):
    r = np.random.default_rng(seed)
    a_bits = r.integers(0, 2, n).astype(np.uint8)
    w_bits = r.integers(0, 2, n).astype(np.uint8)
    a, w = pack_bits(a_bits), pack_bits(w_bits)
    pm_dot = float(np.dot(2.0 * a_bits - 1, 2.0 * w_bits - 1))
    got = xnor_popcount_dot(a, w, n)
    assert got == (pm_dot + n) / 2
    assert got == xnor_popcount_dot(w, a, n)
    assert 0 <= got <= n


def test_popcount_512_frozen():
    bits = np.random.default_rng(7).integers(0, 2, (2, 512)).astype(np.uint8)
    # 274 frozen from an element-wise equality count over the unpacked bits
    assert xnor_popcount_dot(pack_bits(bits[0]), pack_bits(bits[1]), 512) == 274


def test_popcount_length_mismatch():
    with pytest.raises(ValueError):
        xnor_popcount_dot(np.zeros(2, np.uint64), np.zeros(1, np.uint64), 64)
    with pytest.raises(ValueError):
        xnor_popcount_dot(np.zeros(2, np.uint64), np.zeros(2, np.uint64), 64)


@given(bit_tensors(max_side=3, max_c=200))
def test_pack_bits_batch_matches_per_pixel(t):
    words = pack_bits(t)
    for y in range(t.shape[0]):
        for x in range(t.shape[1]):
            assert np.array_equal(words[y, x], pack_bits(t[y, x]))
    assert np.array_equal(unpack_bits(words, t.shape[2]), t)
