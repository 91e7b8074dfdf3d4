"""Compiled inner loops for the packed inference path."""

from __future__ import annotations

import numpy as np
from numba import njit, prange, types
from numba.extending import intrinsic

GREATER, LESS, CONST_ONE, CONST_ZERO = 0, 1, 2, 3


@intrinsic
def popcount64(typingctx, x):
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        return builder.ctpop(args[0])

    return sig, codegen


@njit(cache=True, parallel=True)
def binconv_mismatch(padded, weights, nw, out):
    """Count disagreeing bits between every receptive field and every filter.

    padded:  (N, Hp, Wp * nw) uint64, input words with a zero border
    weights: (F, kh, kw * nw) uint64
    out:     (N, H, W, F) int32
    """
    n_img, h, w, n_f = out.shape
    kh = weights.shape[1]
    seg = weights.shape[2]
    for r in prange(n_img * h):
        i = r // h
        y = r - i * h
        for x in range(w):
            base = x * nw
            for f in range(n_f):
                acc = 0
                for ky in range(kh):
                    for j in range(seg):
                        acc += popcount64(padded[i, y + ky, base + j] ^ weights[f, ky, j])
                out[i, y, x, f] = acc


@njit(cache=True)
def _fire(s, cut, pol):
    if pol == GREATER:
        return 1 if s >= cut else 0
    if pol == LESS:
        return 1 if s <= cut else 0
    return 1 if pol == CONST_ONE else 0


@njit(cache=True, parallel=True)
def threshold_pool(counts, keys, cut, polarity, bits_out, idx_out):
    """Fused BN + 2x2 max-pool + binarize on popcounts (N, H, W, F).

    ``keys[f, s]`` ranks the normalized response of popcount ``s`` in channel
    ``f`` so the argmax corner (lowest corner on ties) is the one the
    unfolded BN -> pool path would pick.
    """
    n_img, ho, wo, n_f = bits_out.shape
    for r in prange(n_img * ho):
        i = r // ho
        y = r - i * ho
        for x in range(wo):
            for f in range(n_f):
                best = -1
                best_q = 0
                best_s = 0
                for q in range(4):
                    s = counts[i, 2 * y + q // 2, 2 * x + q % 2, f]
                    k = keys[f, s]
                    if k > best:
                        best = k
                        best_q = q
                        best_s = s
                idx_out[i, y, x, f] = best_q
                bits_out[i, y, x, f] = _fire(best_s, cut[f], polarity[f])


@njit(cache=True, parallel=True)
def threshold(counts, cut, polarity, bits_out):
    n_img, h, w, n_f = bits_out.shape
    for r in prange(n_img * h):
        i = r // h
        y = r - i * h
        for x in range(w):
            for f in range(n_f):
                bits_out[i, y, x, f] = _fire(counts[i, y, x, f], cut[f], polarity[f])


def binconv_counts(words: np.ndarray, weights: np.ndarray, channels: int) -> np.ndarray:
    """Popcount convolution with same-padding; padded positions are bit 0.

    words: (N, H, W, nw) uint64; weights: (F, kh, kw, nw) uint64.
    Returns agreement counts (N, H, W, F) as int32.
    """
    n_img, h, w, nw = words.shape
    n_f, kh, kw, _ = weights.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    if ph or pw:
        padded = np.zeros((n_img, h + kh - 1, w + kw - 1, nw), dtype=np.uint64)
        padded[:, ph : ph + h, pw : pw + w] = words
    else:
        padded = np.ascontiguousarray(words)
    out = np.empty((n_img, h, w, n_f), dtype=np.int32)
    binconv_mismatch(
        padded.reshape(n_img, padded.shape[1], -1),
        np.ascontiguousarray(weights).reshape(n_f, kh, kw * nw),
        nw,
        out,
    )
    volume = kh * kw * channels
    np.subtract(volume, out, out=out)
    return out


FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)


@njit(cache=True)
def fnv_fold64(words, nbytes):
    """FNV-1a style fold over little-endian 64-bit words, then over the byte length."""
    h = FNV_OFFSET
    for i in range(words.shape[0]):
        h ^= words[i]
        h *= FNV_PRIME
    h ^= np.uint64(nbytes)
    h *= FNV_PRIME
    return h
