"""Double-precision +/-1 reference forward pass.

Deliberately slow and independent of the engine in ``netgraph``: its own
shifted-accumulate convolution, its own pooling scan, and activations held
as +/-1 reals throughout. Used as the oracle for every packed path.
"""

from __future__ import annotations

import numpy as np

from .nnlayers import softmax_pixels


def pm_conv(input_pm: np.ndarray, weights_pm: np.ndarray, pad_value: float = -1.0) -> np.ndarray:
    """Same-padded cross-correlation of (H, W, C) with (kh, kw, C, F), border filled with ``pad_value``."""
    x = np.asarray(input_pm, dtype=np.float64)
    w = np.asarray(weights_pm, dtype=np.float64)
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError("pm_conv expects (H, W, C) input and (kh, kw, C, F) weights")
    h, wd, c = x.shape
    kh, kw, wc, f = w.shape
    if wc != c:
        raise ValueError(f"input has {c} channels, weights expect {wc}")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    padded = np.full((h + kh - 1, wd + kw - 1, c), pad_value, dtype=np.float64)
    padded[ph : ph + h, pw : pw + wd] = x
    out = np.zeros((h, wd, f))
    for ky in range(kh):
        for kx in range(kw):
            out += np.tensordot(padded[ky : ky + h, kx : kx + wd], w[ky, kx], axes=([2], [0]))
    return out


def popcount_to_pm(s: np.ndarray, n: int) -> np.ndarray:
    """XNOR agreement count -> +/-1 dot product: 2s - n."""
    return 2.0 * np.asarray(s, dtype=np.float64) - n


def pm_to_popcount(s_pm: np.ndarray, n: int) -> np.ndarray:
    return (np.asarray(s_pm, dtype=np.float64) + n) / 2.0


def _bn(s, bn):
    return (s - bn.mean) / np.sqrt(bn.var + bn.eps) * bn.gamma + bn.beta


def _sign(a):
    return np.where(a > 0, 1.0, -1.0)


def _pool(a):
    """Sequential corner scan; a later corner wins only if strictly larger."""
    corners = [a[0::2, 0::2], a[0::2, 1::2], a[1::2, 0::2], a[1::2, 1::2]]
    best = corners[0].copy()
    idx = np.zeros(best.shape, dtype=np.uint8)
    for q in (1, 2, 3):
        better = corners[q] > best
        best[better] = corners[q][better]
        idx[better] = q
    return best, idx


def _unpool(a, idx, fill):
    h, w, c = a.shape
    out = np.full((2 * h, 2 * w, c), fill, dtype=np.float64)
    for q in range(4):
        dy, dx = divmod(q, 2)
        sel = idx == q
        out[dy::2, dx::2][sel] = a[sel]
    return out


def reference_forward(net, image: np.ndarray):
    """Returns (salience map, intermediates) where intermediates holds
    ``pm`` (list of +/-1 activations per block), ``s_pm`` (raw +/-1 sums),
    ``indices`` (pool indices by block id) and ``logits``.
    """
    cfg = net.config
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape != (cfg.input_h, cfg.input_w, 1):
        raise ValueError(f"image shape {img.shape} does not match config")

    a0 = _bn(pm_conv(img, net.adapter.weights, pad_value=0.0), net.adapter.bn)
    h = _sign(a0)
    pm, s_pms, indices = [h], [], {}
    logits = None
    for k, layer in enumerate(net.blocks, 1):
        block = cfg.blocks[k]
        if block.has_unpool:
            h = _unpool(h, indices[block.unpool_source], fill=-1.0)
        w_pm = 2.0 * layer.weight_bits.astype(np.float64) - 1.0
        s_pm = pm_conv(h, w_pm, pad_value=-1.0)
        s_pms.append(s_pm)
        a = _bn(pm_to_popcount(s_pm, layer.volume), layer.bn)
        if block.has_pool:
            a, indices[k] = _pool(a)
        if block.kind == "classifier_softmax":
            logits = a
        else:
            h = _sign(a)
            pm.append(h)
    inter = {"pm": pm, "s_pm": s_pms, "indices": indices, "logits": logits}
    return softmax_pixels(logits), inter
