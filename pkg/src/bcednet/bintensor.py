"""Channel-packed binary feature maps and the XNOR-popcount primitive.

Layout: a feature map of shape (H, W, C) is stored as uint64 words of shape
(H, W, ceil(C/64)). Channel ``c`` lives in word ``c // 64`` at bit ``c % 64``,
least-significant bit first. Padding bits above ``C`` in the last word are
always zero.

Bit 1 stands for +1 and bit 0 for -1 whenever the +/-1 algebra is needed.

Real-valued tensors are plain float64 numpy arrays of shape (H, W, C).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD_BITS = 64


def words_per_pixel(channels: int) -> int:
    return (channels + WORD_BITS - 1) // WORD_BITS


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a {0,1} array along its last axis into little-endian uint64 words.

    Works on any leading shape, so batches pack in one call.
    """
    bits = np.asarray(bits)
    c = bits.shape[-1]
    nw = words_per_pixel(c)
    if nw * WORD_BITS != c:
        pad = [(0, 0)] * (bits.ndim - 1) + [(0, nw * WORD_BITS - c)]
        bits = np.pad(bits, pad)
    packed = np.packbits(bits.astype(np.uint8, copy=False), axis=-1, bitorder="little")
    packed = np.ascontiguousarray(packed)
    return packed.view("<u8").astype(np.uint64, copy=False)


def unpack_bits(words: np.ndarray, channels: int) -> np.ndarray:
    """Inverse of :func:`pack_bits`; returns uint8 of shape (..., channels)."""
    words = np.ascontiguousarray(words, dtype=np.uint64)
    raw = words.astype("<u8", copy=False).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little")
    return bits[..., :channels]


def padding_mask(channels: int) -> np.ndarray:
    """Per-pixel word mask with ones exactly at valid channel positions."""
    nw = words_per_pixel(channels)
    mask = np.full(nw, np.iinfo(np.uint64).max, dtype=np.uint64)
    tail = channels - (nw - 1) * WORD_BITS
    if tail < WORD_BITS:
        mask[-1] = np.uint64((1 << tail) - 1)
    return mask


@dataclass(frozen=True, eq=False)
class BitTensor:
    height: int
    width: int
    channels: int
    words: np.ndarray

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1:
            raise ValueError("BitTensor dimensions must be >= 1")
        words = np.asarray(self.words)
        shape = (self.height, self.width, words_per_pixel(self.channels))
        if words.dtype != np.uint64 or words.shape != shape:
            raise ValueError(f"words must be uint64 {shape}, got {words.dtype} {words.shape}")
        if np.any(words & ~padding_mask(self.channels)):
            raise ValueError("padding bits above the channel count must be zero")
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def bit(self, y: int, x: int, c: int) -> int:
        return int(self.words[y, x, c // WORD_BITS] >> np.uint64(c % WORD_BITS)) & 1

    def __eq__(self, other):
        if not isinstance(other, BitTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.words, other.words)

    def __repr__(self):
        return f"BitTensor({self.height}x{self.width}x{self.channels})"

    @classmethod
    def from_words(cls, words: np.ndarray, channels: int) -> "BitTensor":
        h, w, _ = words.shape
        return cls(h, w, channels, np.asarray(words, dtype=np.uint64))


def pack(t: np.ndarray) -> BitTensor:
    """Pack an (H, W, C) tensor whose entries are exactly 0 or 1."""
    t = np.asarray(t)
    if t.ndim != 3:
        raise ValueError(f"expected rank-3 (H, W, C) tensor, got shape {t.shape}")
    ones = t == 1
    if not np.all(ones | (t == 0)):
        raise ValueError("pack() requires every value to be exactly 0 or 1")
    h, w, c = t.shape
    return BitTensor(h, w, c, pack_bits(ones))


def unpack(b: BitTensor) -> np.ndarray:
    return unpack_bits(b.words, b.channels).astype(np.float64)


def to_pm(b: BitTensor) -> np.ndarray:
    """Bit 1 -> +1.0, bit 0 -> -1.0."""
    return 2.0 * unpack(b) - 1.0


def xnor_popcount_dot(a_words, w_words, valid_bits: int) -> int:
    """Count positions among the first ``valid_bits`` where the two bit strings agree."""
    a = np.asarray(a_words, dtype=np.uint64).ravel()
    w = np.asarray(w_words, dtype=np.uint64).ravel()
    need = words_per_pixel(valid_bits)
    if a.size != w.size:
        raise ValueError(f"word sequences differ in length ({a.size} vs {w.size})")
    if a.size != need:
        raise ValueError(f"{valid_bits} bits need {need} words, got {a.size}")
    agree = ~(a ^ w) & padding_mask(valid_bits)
    return int(np.bitwise_count(agree).sum())
