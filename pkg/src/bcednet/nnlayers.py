"""Layer primitives: real and binary convolution, batch norm, binarization,
2x2 max-pool with index capture, index-directed unpooling, BN/binarize
threshold folding and per-pixel softmax.

Tensors are float64 numpy arrays laid out (H, W, C); every function also
accepts a leading batch axis (N, H, W, C).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .bintensor import BitTensor, pack_bits, unpack_bits, words_per_pixel

DEFAULT_EPS = 1e-5

POLARITY_NAMES = ("greater", "less", "constant_one", "constant_zero")


@dataclass
class BNParams:
    """Per-output-channel batch-norm parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        arrays = [np.array(a, dtype=np.float64, ndmin=1) for a in (self.gamma, self.beta, self.mean, self.var)]
        if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1:
            raise ValueError("BN parameter arrays must be 1-D and equally long")
        self.gamma, self.beta, self.mean, self.var = arrays
        if np.any(self.var < 0):
            raise ValueError("BN variance must be non-negative")
        if not self.eps > 0:
            raise ValueError("BN epsilon must be positive")

    @classmethod
    def identity(cls, channels: int, eps: float = DEFAULT_EPS) -> "BNParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def copy(self) -> "BNParams":
        return BNParams(self.gamma.copy(), self.beta.copy(), self.mean.copy(), self.var.copy(), self.eps)

    def same_as(self, other: "BNParams") -> bool:
        return self.eps == other.eps and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("gamma", "beta", "mean", "var")
        )


@dataclass(frozen=True, eq=False)
class BinConvLayer:
    """Binary convolution; weights are packed per output filter as (F, kh, kw, words)."""

    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    weights: np.ndarray
    bn: BNParams

    def __post_init__(self):
        shape = (self.out_channels, self.kernel_h, self.kernel_w, words_per_pixel(self.in_channels))
        w = np.asarray(self.weights)
        if w.dtype != np.uint64 or w.shape != shape:
            raise ValueError(f"binary weights must be uint64 {shape}, got {w.dtype} {w.shape}")
        if self.kernel_h % 2 == 0 or self.kernel_w % 2 == 0:
            raise ValueError("only odd kernels keep same-padding symmetric")
        if self.bn.channels != self.out_channels:
            raise ValueError("BN channel count differs from out_channels")

    @classmethod
    def from_bits(cls, bits: np.ndarray, bn: BNParams) -> "BinConvLayer":
        """Build from a {0,1} array shaped (kh, kw, in, out)."""
        kh, kw, cin, cout = bits.shape
        words = pack_bits(np.transpose(bits, (3, 0, 1, 2)))
        return cls(kh, kw, cin, cout, words, bn)

    @property
    def pad(self) -> tuple[int, int]:
        return (self.kernel_h - 1) // 2, (self.kernel_w - 1) // 2

    @property
    def volume(self) -> int:
        """Bits per filter, i.e. the largest possible popcount."""
        return self.kernel_h * self.kernel_w * self.in_channels

    @property
    def filters(self) -> list[BitTensor]:
        return [BitTensor(self.kernel_h, self.kernel_w, self.in_channels, w) for w in self.weights]

    @cached_property
    def weight_bits(self) -> np.ndarray:
        """Weights as uint8 (kh, kw, in, out)."""
        return np.transpose(unpack_bits(self.weights, self.in_channels), (1, 2, 3, 0))

    @cached_property
    def pm_weights(self) -> np.ndarray:
        """Weights in the +/-1 algebra as float32 (kh, kw, in, out)."""
        return (2.0 * self.weight_bits - 1.0).astype(np.float32)


@dataclass(frozen=True, eq=False)
class RealConvLayer:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    weights: np.ndarray  # (kh, kw, in, out) float64
    bn: BNParams

    def __post_init__(self):
        shape = (self.kernel_h, self.kernel_w, self.in_channels, self.out_channels)
        if np.shape(self.weights) != shape:
            raise ValueError(f"real weights must have shape {shape}, got {np.shape(self.weights)}")
        if self.bn.channels != self.out_channels:
            raise ValueError("BN channel count differs from out_channels")


@dataclass(frozen=True, eq=False)
class FoldedThreshold:
    """BN followed by binarization, collapsed onto the integer popcount.

    ``theta`` is the real crossing point and ``polarity`` its direction.
    ``cut`` is the exact integer form used at run time: for ``greater`` the
    bit is ``s >= cut``, for ``less`` it is ``s <= cut``.
    ``keys`` (optional, shape (C, volume + 1)) ranks popcounts by their
    normalized value so a fused max-pool picks the same corner as BN -> pool.
    """

    theta: np.ndarray
    polarity: np.ndarray  # int8 codes, see POLARITY_NAMES
    cut: np.ndarray  # int64
    source: BNParams = field(repr=False)
    volume: int | None = None
    keys: np.ndarray | None = field(default=None, repr=False)

    def polarity_names(self) -> list[str]:
        return [POLARITY_NAMES[p] for p in self.polarity]

    def fire(self, s: np.ndarray) -> np.ndarray:
        """Binarized output for integer popcounts ``s`` shaped (..., C)."""
        s = np.asarray(s)
        pol = self.polarity
        return np.where(
            pol == _kernels.GREATER,
            s >= self.cut,
            np.where(pol == _kernels.LESS, s <= self.cut, pol == _kernels.CONST_ONE),
        ).astype(np.uint8)


# ---------------------------------------------------------------------------
# convolution


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def im2col(x: np.ndarray, kh: int, kw: int, pad_value: float = 0.0) -> np.ndarray:
    """Same-padded patches of one (H, W, C) image as an (H*W, kh*kw*C) matrix.

    Column order is (ky, kx, c), matching ``weights.reshape(kh*kw*C, F)``
    for weights laid out (kh, kw, C, F).
    """
    h, w, c = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    if kh == 1 and kw == 1:
        return x.reshape(h * w, c)
    padded = np.pad(x, ((ph, ph), (pw, pw), (0, 0)), constant_values=pad_value)
    win = sliding_window_view(padded, (kh, kw), axis=(0, 1))  # (h, w, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, kh * kw * c)


_COLS_BUDGET = 1 << 26  # bytes of im2col scratch per chunk of images


def im2col_batch(x: np.ndarray, kh: int, kw: int, pad_value: float = 0.0) -> np.ndarray:
    """:func:`im2col` for a batch (N, H, W, C): one (N*H*W, kh*kw*C) matrix."""
    n, h, w, c = x.shape
    if kh == 1 and kw == 1:
        return x.reshape(n * h * w, c)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)), constant_values=pad_value)
    win = sliding_window_view(padded, (kh, kw), axis=(1, 2))  # (n, h, w, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, kh * kw * c)


def image_chunks(x: np.ndarray, kh: int, kw: int):
    """Slices over the batch axis keeping each chunk's im2col matrix under budget."""
    n, h, w, c = x.shape
    per_image = max(h * w * kh * kw * c * x.dtype.itemsize, 1)
    step = max(1, _COLS_BUDGET // per_image)
    return [slice(i, min(i + step, n)) for i in range(0, n, step)]


def conv_same(x: np.ndarray, weights: np.ndarray, pad_value: float = 0.0) -> np.ndarray:
    """Cross-correlation with same-padding; x (N, H, W, C), weights (kh, kw, C, F)."""
    kh, kw, c, f = weights.shape
    n, h, w, cx = x.shape
    if cx != c:
        raise ValueError(f"input has {cx} channels, layer expects {c}")
    dtype = np.result_type(x.dtype, weights.dtype)
    x = x.astype(dtype, copy=False)
    wmat = weights.reshape(kh * kw * c, f).astype(dtype, copy=False)
    out = np.empty((n, h, w, f), dtype=dtype)
    for sl in image_chunks(x, kh, kw):
        cols = im2col_batch(x[sl], kh, kw, pad_value)
        np.matmul(cols, wmat, out=out[sl].reshape(-1, f))
    return out


def conv2d_real(x: np.ndarray, layer: RealConvLayer) -> np.ndarray:
    """Zero-padded real convolution (block-0 adapter)."""
    xb, single = _as_batch(x)
    if xb.shape[-1] != layer.in_channels:
        raise ValueError(f"input has {xb.shape[-1]} channels, layer expects {layer.in_channels}")
    out = conv_same(xb.astype(np.float64), np.asarray(layer.weights, dtype=np.float64))
    return out[0] if single else out


def binconv_words(words: np.ndarray, layer: BinConvLayer) -> np.ndarray:
    """Popcount convolution over packed words (N, H, W, nw) -> int32 (N, H, W, F)."""
    if words.shape[-1] != words_per_pixel(layer.in_channels):
        raise ValueError("input word count does not match layer.in_channels")
    return _kernels.binconv_counts(words, layer.weights, layer.in_channels)


def binconv(x: BitTensor, layer: BinConvLayer) -> np.ndarray:
    """XNOR-popcount convolution of a packed feature map; returns float64 (H, W, F)."""
    if x.channels != layer.in_channels:
        raise ValueError(f"input has {x.channels} channels, layer expects {layer.in_channels}")
    return binconv_words(x.words[None], layer)[0].astype(np.float64)


# ---------------------------------------------------------------------------
# batch norm and binarization


def batchnorm_infer(s: np.ndarray, bn: BNParams) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != bn.channels:
        raise ValueError(f"tensor has {s.shape[-1]} channels, BN has {bn.channels}")
    return (s - bn.mean) / np.sqrt(bn.var + bn.eps) * bn.gamma + bn.beta


def batchnorm_train(s_batch, bn: BNParams, momentum: float = 0.9) -> tuple[np.ndarray, BNParams]:
    """Normalize with statistics over batch and spatial positions.

    Running statistics move as ``running = momentum * running + (1 - momentum) * batch``.
    """
    if isinstance(s_batch, np.ndarray):
        s = np.asarray(s_batch, dtype=np.float64)
    else:
        items = list(s_batch)
        if not items:
            raise ValueError("batchnorm_train needs a non-empty batch")
        if len({np.shape(t) for t in items}) != 1:
            raise ValueError("batch members differ in shape")
        s = np.stack(items).astype(np.float64)
    if s.shape[0] == 0:
        raise ValueError("batchnorm_train needs a non-empty batch")
    if s.shape[-1] != bn.channels:
        raise ValueError(f"tensor has {s.shape[-1]} channels, BN has {bn.channels}")
    axes = tuple(range(s.ndim - 1))
    mean = s.mean(axis=axes)
    var = s.var(axis=axes)
    out = (s - mean) / np.sqrt(var + bn.eps) * bn.gamma + bn.beta
    updated = BNParams(
        bn.gamma.copy(),
        bn.beta.copy(),
        momentum * bn.mean + (1 - momentum) * mean,
        momentum * bn.var + (1 - momentum) * var,
        bn.eps,
    )
    return out, updated


def binarize_bits(a: np.ndarray) -> np.ndarray:
    """1 where a > 0, else 0 (zero itself maps to 0)."""
    return (np.asarray(a) > 0).astype(np.uint8)


def binarize(a: np.ndarray) -> BitTensor:
    a = np.asarray(a)
    if a.ndim != 3:
        raise ValueError("binarize() takes one (H, W, C) tensor")
    h, w, c = a.shape
    return BitTensor(h, w, c, pack_bits(a > 0))


# ---------------------------------------------------------------------------
# pooling


def _windows(a: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N, H/2, W/2, C, 4), corners ordered TL, TR, BL, BR."""
    n, h, w, c = a.shape
    if h % 2 or w % 2:
        raise ValueError(f"2x2 pooling needs even spatial dims, got {h}x{w}")
    v = a.reshape(n, h // 2, 2, w // 2, 2, c)
    return v.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)


def maxpool2x2(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2x2 max-pool. Ties go to the lowest corner index."""
    ab, single = _as_batch(a)
    win = _windows(ab)
    idx = np.argmax(win, axis=-1).astype(np.uint8)
    pooled = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return (pooled[0], idx[0]) if single else (pooled, idx)


def unpool2x2(a: np.ndarray, idx: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Scatter each value to its recorded corner of a 2x2 window; ``fill`` elsewhere."""
    ab, single = _as_batch(a)
    ib, _ = _as_batch(idx)
    if ab.shape != ib.shape:
        raise ValueError(f"values {ab.shape} and indices {ib.shape} differ in shape")
    if ib.size and ib.max() > 3:
        raise ValueError("pool index out of range (must be 0..3)")
    n, h, w, c = ab.shape
    out = np.full((n, 2 * h, 2 * w, c), fill, dtype=ab.dtype)
    for q in range(4):
        dy, dx = divmod(q, 2)
        view = out[:, dy::2, dx::2, :]
        hit = ib == q
        view[hit] = ab[hit]
    return out[0] if single else out


def unpool_words(words: np.ndarray, idx: np.ndarray, channels: int) -> np.ndarray:
    """Unpool packed feature maps; empty positions hold bit 0."""
    n, h, w, nw = words.shape
    out = np.zeros((n, 2 * h, 2 * w, nw), dtype=np.uint64)
    for q in range(4):
        dy, dx = divmod(q, 2)
        out[:, dy::2, dx::2, :] = words & pack_bits(idx == q)
    return out


# ---------------------------------------------------------------------------
# threshold folding


def _bn_per_channel(s: np.ndarray, bn: BNParams) -> np.ndarray:
    # same operation order as batchnorm_infer so the rounding is identical
    return (s - bn.mean) / np.sqrt(bn.var + bn.eps) * bn.gamma + bn.beta


def fold_bn_binrz(bn: BNParams, volume: int | None = None, pool_keys: bool = False) -> FoldedThreshold:
    """Fuse ``binarize(batchnorm_infer(s))`` into a per-channel integer comparison.

    ``volume`` bounds the popcount range [0, volume]; without it the integer
    cut is searched over a wide symmetric range.
    """
    g, b = bn.gamma, bn.beta
    sd = np.sqrt(bn.var + bn.eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = bn.mean - b * sd / g
    polarity = np.where(
        g > 0,
        _kernels.GREATER,
        np.where(g < 0, _kernels.LESS, np.where(b > 0, _kernels.CONST_ONE, _kernels.CONST_ZERO)),
    ).astype(np.int8)

    lo, hi = (0, volume) if volume is not None else (-(2**40), 2**40)
    finite = np.where(np.isfinite(theta), theta, 0.0)
    t = np.clip(finite, lo - 1, hi + 1)
    greater = polarity == _kernels.GREATER
    less = polarity == _kernels.LESS
    # closed-form starting point, then exact correction against the unfolded expression
    cut = np.where(greater, np.floor(t) + 1, np.ceil(t) - 1).astype(np.int64)
    cut = np.clip(cut, lo - 1, hi + 1)

    def fires(s):
        return _bn_per_channel(s.astype(np.float64), bn) > 0

    for _ in range(64):
        # greater: cut is the smallest s in [lo, hi + 1] that fires
        down_g = greater & (cut - 1 >= lo) & fires(cut - 1)
        up_g = greater & (cut <= hi) & ~fires(cut)
        # less: cut is the largest s in [lo - 1, hi] that fires
        up_l = less & (cut + 1 <= hi) & fires(cut + 1)
        down_l = less & (cut >= lo) & ~fires(cut)
        moved = down_g | up_g | up_l | down_l
        if not moved.any():
            break
        cut = cut - down_g + up_g + up_l - down_l
    else:
        cut = _bisect_cut(bn, polarity, lo, hi)
    cut = np.where(greater | less, cut, 0)

    keys = None
    if pool_keys:
        if volume is None:
            raise ValueError("pool keys need the popcount volume")
        keys = pool_order_keys(bn, volume)
    return FoldedThreshold(theta, polarity, cut, bn.copy(), volume, keys)


def _bisect_cut(bn: BNParams, polarity: np.ndarray, lo: int, hi: int) -> np.ndarray:
    cut = np.zeros(polarity.shape[0], dtype=np.int64)
    sd = np.sqrt(bn.var + bn.eps)
    for c, pol in enumerate(polarity):
        def fire(s):
            return (float(s) - bn.mean[c]) / sd[c] * bn.gamma[c] + bn.beta[c] > 0

        if pol == _kernels.GREATER:
            a, z = lo, hi + 1  # first firing index lies in [a, z]
            while a < z:
                m = (a + z) // 2
                a, z = (a, m) if fire(m) else (m + 1, z)
            cut[c] = a
        elif pol == _kernels.LESS:
            a, z = lo - 1, hi  # last firing index lies in [a, z]
            while a < z:
                m = (a + z + 1) // 2
                a, z = (m, z) if fire(m) else (a, m - 1)
            cut[c] = a
    return cut


def pool_order_keys(bn: BNParams, volume: int) -> np.ndarray:
    """Dense rank of each popcount's normalized value, per channel: (C, volume + 1) int32."""
    s = np.broadcast_to(np.arange(volume + 1, dtype=np.float64)[:, None], (volume + 1, bn.channels))
    vals = batchnorm_infer(s, bn).T  # (C, volume + 1)
    order = np.argsort(vals, axis=1, kind="stable")
    ordered = np.take_along_axis(vals, order, axis=1)
    step = np.concatenate([np.zeros((vals.shape[0], 1), bool), np.diff(ordered, axis=1) > 0], axis=1)
    ranks = np.cumsum(step, axis=1).astype(np.int32)
    keys = np.empty_like(ranks)
    np.put_along_axis(keys, order, ranks, axis=1)
    return keys


# ---------------------------------------------------------------------------


def softmax_pixels(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
