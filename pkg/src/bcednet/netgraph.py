"""Network configuration, construction and the three forward paths.

Modes
-----
``real``
    +/-1 activations and weights as float32, convolution by im2col GEMM.
    This is the numerical baseline and the ground truth for the packed modes.
``packed_unfolded``
    XNOR-popcount convolution on packed words, then BN -> pool -> binarize
    exactly as in ``real``.
``packed_folded``
    XNOR-popcount convolution with BN + (pool) + binarize fused into integer
    threshold comparisons.

All three modes produce identical binary activations. Batch norm always acts
on the popcount ``s`` in [0, volume]; the real mode recovers it from the
+/-1 sum as ``(s_pm + volume) / 2``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels
from .bintensor import pack_bits, unpack_bits
from .nnlayers import (
    BinConvLayer,
    BNParams,
    FoldedThreshold,
    RealConvLayer,
    batchnorm_infer,
    binarize_bits,
    binconv_words,
    conv2d_real,
    conv_same,
    fold_bn_binrz,
    maxpool2x2,
    softmax_pixels,
    unpool2x2,
    unpool_words,
)

MODES = ("real", "packed_unfolded", "packed_folded")
BLOCK_KINDS = ("adapter", "encoder", "decoder", "classifier", "classifier_softmax")


class ConfigError(ValueError):
    pass


class StaleThresholdError(RuntimeError):
    """Folded thresholds no longer match the network's BN parameters."""


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    kernel_h: int
    kernel_w: int
    out_channels: int
    has_pool: bool = False
    has_unpool: bool = False
    unpool_source: int | None = None


@dataclass(frozen=True)
class NetConfig:
    blocks: tuple[BlockSpec, ...]
    input_h: int = 32
    input_w: int = 128
    num_classes: int = 27

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        validate_config(self)

    @property
    def num_pools(self) -> int:
        return sum(b.has_pool for b in self.blocks)

    def in_channels(self, k: int) -> int:
        return 1 if k == 0 else self.blocks[k - 1].out_channels

    def block_shapes(self) -> list[tuple[int, int, int]]:
        """Output (H, W, C) of every block, after pooling where present."""
        h, w = self.input_h, self.input_w
        shapes = []
        for b in self.blocks:
            if b.has_unpool:
                h, w = 2 * h, 2 * w
            if b.has_pool:
                h, w = h // 2, w // 2
            shapes.append((h, w, b.out_channels))
        return shapes

    def conv_shapes(self) -> list[tuple[int, int]]:
        """Spatial size each block's convolution runs at."""
        h, w = self.input_h, self.input_w
        out = []
        for b in self.blocks:
            if b.has_unpool:
                h, w = 2 * h, 2 * w
            out.append((h, w))
            if b.has_pool:
                h, w = h // 2, w // 2
        return out


def validate_config(cfg: NetConfig) -> None:
    blocks = cfg.blocks
    if not blocks or blocks[0].kind != "adapter":
        raise ConfigError("the first block must be the adapter")
    if sum(b.kind == "adapter" for b in blocks) != 1:
        raise ConfigError("exactly one adapter block is allowed")
    for k, b in enumerate(blocks):
        if b.kind not in BLOCK_KINDS:
            raise ConfigError(f"block {k}: unknown kind {b.kind!r}")
        if b.out_channels < 1 or b.kernel_h < 1 or b.kernel_w < 1:
            raise ConfigError(f"block {k}: sizes must be positive")
        if b.kernel_h % 2 == 0 or b.kernel_w % 2 == 0:
            raise ConfigError(f"block {k}: kernels must be odd")
        if b.has_pool and b.kind != "encoder":
            raise ConfigError(f"block {k}: only encoder blocks pool")
        if b.has_unpool and b.kind != "decoder":
            raise ConfigError(f"block {k}: only decoder blocks unpool")
        if b.kind.startswith("classifier") and (b.kernel_h, b.kernel_w) != (1, 1):
            raise ConfigError(f"block {k}: classifier blocks use 1x1 kernels")
    last = blocks[-1]
    if last.kind != "classifier_softmax" or sum(b.kind == "classifier_softmax" for b in blocks) != 1:
        raise ConfigError("exactly one classifier_softmax block is required, and it must be last")
    if last.out_channels != cfg.num_classes:
        raise ConfigError(f"final block emits {last.out_channels} channels, expected {cfg.num_classes}")
    if len(blocks) < 2:
        raise ConfigError("need at least one binary block")

    pools = [k for k, b in enumerate(blocks) if b.has_pool]
    unpools = [k for k, b in enumerate(blocks) if b.has_unpool]
    if len(pools) != len(unpools):
        raise ConfigError(f"{len(pools)} pooling blocks but {len(unpools)} unpooling blocks")
    sources = [blocks[k].unpool_source for k in unpools]
    if sources != pools[::-1]:
        raise ConfigError(
            f"unpool sources {sources} must pair with pooling blocks in reverse order {pools[::-1]}"
        )
    for k in unpools:
        if blocks[k].unpool_source >= k:
            raise ConfigError(f"block {k} unpools indices from a later block")
    scale = 2 ** len(pools)
    if cfg.input_h % scale or cfg.input_w % scale:
        raise ConfigError(f"input {cfg.input_h}x{cfg.input_w} not divisible by 2^{len(pools)}")
    # unpooled maps must have the channel count the pool indices were recorded with
    for k in unpools:
        src = blocks[k].unpool_source
        if cfg.in_channels(k) != blocks[src].out_channels:
            raise ConfigError(
                f"block {k} unpools {cfg.in_channels(k)} channels with indices from block {src} "
                f"({blocks[src].out_channels} channels)"
            )
    # running depth must never go negative (unpool before the matching pool)
    depth = 0
    for k, b in enumerate(blocks):
        depth += b.has_pool - b.has_unpool
        if depth < 0:
            raise ConfigError(f"block {k} unpools before any matching pool")


def default_config() -> NetConfig:
    """The 11-block layout: 3x3 kernels, 64-channel adapter, 512 channels elsewhere."""
    blocks = [BlockSpec("adapter", 3, 3, 64)]
    blocks += [BlockSpec("encoder", 3, 3, 512, has_pool=True) for _ in range(4)]
    blocks += [BlockSpec("decoder", 3, 3, 512, has_unpool=True, unpool_source=src) for src in (4, 3, 2, 1)]
    blocks += [BlockSpec("classifier", 1, 1, 512), BlockSpec("classifier_softmax", 1, 1, 27)]
    return NetConfig(tuple(blocks))


def small_config(
    width: int = 32,
    pools: int = 4,
    adapter: int | None = None,
    input_h: int = 32,
    input_w: int = 128,
    classifier: int | None = None,
    num_classes: int = 27,
) -> NetConfig:
    """Same topology at reduced width / depth, for tests and desk-scale training."""
    adapter = adapter or width
    blocks = [BlockSpec("adapter", 3, 3, adapter)]
    blocks += [BlockSpec("encoder", 3, 3, width, has_pool=True) for _ in range(pools)]
    # last decoder must hand the classifier as many channels as the first encoder saw
    blocks += [
        BlockSpec("decoder", 3, 3, width, has_unpool=True, unpool_source=src) for src in range(pools, 0, -1)
    ]
    blocks += [
        BlockSpec("classifier", 1, 1, classifier or width),
        BlockSpec("classifier_softmax", 1, 1, num_classes),
    ]
    return NetConfig(tuple(blocks), input_h, input_w, num_classes)


# ---------------------------------------------------------------------------
# plain-text config files
#
#   input 32 128
#   classes 27
#   adapter 3x3 64
#   encoder 3x3 512 pool
#   decoder 3x3 512 unpool=4
#   classifier 1x1 512
#   classifier_softmax 1x1 27
#
# Block ids count block lines from 0. '#' starts a comment.


def format_config(cfg: NetConfig) -> str:
    lines = [f"input {cfg.input_h} {cfg.input_w}", f"classes {cfg.num_classes}"]
    for b in cfg.blocks:
        line = f"{b.kind} {b.kernel_h}x{b.kernel_w} {b.out_channels}"
        if b.has_pool:
            line += " pool"
        if b.has_unpool:
            line += f" unpool={b.unpool_source}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> NetConfig:
    h, w, classes = 32, 128, 27
    blocks = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "input":
                h, w = int(parts[1]), int(parts[2])
            elif parts[0] == "classes":
                classes = int(parts[1])
            elif parts[0] in BLOCK_KINDS:
                kh, kw = (int(v) for v in parts[1].lower().split("x"))
                block = dict(kind=parts[0], kernel_h=kh, kernel_w=kw, out_channels=int(parts[2]))
                for flag in parts[3:]:
                    if flag == "pool":
                        block["has_pool"] = True
                    elif flag.startswith("unpool="):
                        block["has_unpool"] = True
                        block["unpool_source"] = int(flag.split("=", 1)[1])
                    else:
                        raise ConfigError(f"unknown flag {flag!r}")
                blocks.append(BlockSpec(**block))
            else:
                raise ConfigError(f"unknown directive {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"line {lineno}: {raw.strip()!r}: {exc}") from None
    return NetConfig(tuple(blocks), h, w, classes)


def load_config(path) -> NetConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Network:
    config: NetConfig
    adapter: RealConvLayer
    blocks: tuple[BinConvLayer, ...]  # blocks 1..K
    folded: tuple[FoldedThreshold | None, ...] = field(default=(), repr=False)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        cfg = self.config
        if len(self.blocks) != len(cfg.blocks) - 1:
            raise ConfigError("one binary layer per non-adapter block is required")
        a = self.adapter
        block = cfg.blocks[0]
        if (a.kernel_h, a.kernel_w, a.in_channels, a.out_channels) != (block.kernel_h, block.kernel_w, 1, block.out_channels):
            raise ConfigError("adapter layer does not match block 0 of the config")
        for k, layer in enumerate(self.blocks, 1):
            block = cfg.blocks[k]
            want = (block.kernel_h, block.kernel_w, cfg.in_channels(k), block.out_channels)
            got = (layer.kernel_h, layer.kernel_w, layer.in_channels, layer.out_channels)
            if want != got:
                raise ConfigError(f"block {k}: layer {got} does not chain with config {want}")
        if not self.folded:
            object.__setattr__(self, "folded", fold_thresholds(cfg, self.blocks))

    def refold(self) -> "Network":
        return replace(self, folded=fold_thresholds(self.config, self.blocks))

    def thresholds_fresh(self) -> bool:
        return len(self.folded) == len(self.blocks) and all(
            f is None or f.source.same_as(layer.bn) for f, layer in zip(self.folded, self.blocks)
        )

    @property
    def layers(self) -> list:
        return [self.adapter, *self.blocks]


def fold_thresholds(cfg: NetConfig, blocks) -> tuple[FoldedThreshold | None, ...]:
    out = []
    for k, layer in enumerate(blocks, 1):
        block = cfg.blocks[k]
        if block.kind == "classifier_softmax":
            out.append(None)
        else:
            out.append(fold_bn_binrz(layer.bn, layer.volume, pool_keys=block.has_pool))
    return tuple(out)


def init_parameters(cfg: NetConfig, seed: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Adapter weights U[-1, 1] and latent binary weights U[-0.1, 0.1], all from one seed.

    Latent arrays are laid out (kh, kw, in, out).
    """
    rng = np.random.default_rng(seed)
    b0 = cfg.blocks[0]
    adapter = rng.uniform(-1.0, 1.0, size=(b0.kernel_h, b0.kernel_w, 1, b0.out_channels))
    latent = []
    for k in range(1, len(cfg.blocks)):
        b = cfg.blocks[k]
        latent.append(rng.uniform(-0.1, 0.1, size=(b.kernel_h, b.kernel_w, cfg.in_channels(k), b.out_channels)))
    return adapter, latent


def assemble(
    cfg: NetConfig,
    adapter_weights: np.ndarray,
    weight_bits: list[np.ndarray],
    bns: list[BNParams],
) -> Network:
    """Build a Network from adapter reals, per-block {0,1} weights (kh, kw, in, out) and BN tuples."""
    adapter = RealConvLayer(
        cfg.blocks[0].kernel_h,
        cfg.blocks[0].kernel_w,
        1,
        cfg.blocks[0].out_channels,
        np.asarray(adapter_weights, dtype=np.float64),
        bns[0],
    )
    blocks = tuple(BinConvLayer.from_bits(np.asarray(b, dtype=np.uint8), bn) for b, bn in zip(weight_bits, bns[1:]))
    return Network(cfg, adapter, blocks)


def build(cfg: NetConfig, seed: int = 0) -> Network:
    """Deterministic random network; BN starts at gamma=1, beta=0, mean=0, var=1."""
    adapter, latent = init_parameters(cfg, seed)
    bns = [BNParams.identity(b.out_channels) for b in cfg.blocks]
    return assemble(cfg, adapter, [(w > 0).astype(np.uint8) for w in latent], bns)


def with_bn(net: Network, bns: list[BNParams], refold: bool = True) -> Network:
    """Copy of ``net`` with new BN tuples (adapter first). Thresholds are refolded unless told not to."""
    adapter = replace(net.adapter, bn=bns[0])
    blocks = tuple(replace(layer, bn=bn) for layer, bn in zip(net.blocks, bns[1:]))
    if refold:
        return Network(net.config, adapter, blocks)
    return Network(net.config, adapter, blocks, folded=net.folded)


def randomize_bn(net: Network, seed: int, zero_gamma_frac: float = 0.05) -> Network:
    """Replace every BN tuple with random statistics centred on the popcount range.

    Produces networks whose binary activations are neither all-on nor
    all-off, with a mix of positive, negative and zero gammas.
    """
    rng = np.random.default_rng(seed)
    bns = []
    for k, layer in enumerate(net.layers):
        c = layer.out_channels
        if k == 0:
            centre, spread = 0.0, 1.0
        else:
            centre, spread = layer.volume / 2, max(np.sqrt(layer.volume) / 2, 0.5)
        gamma = rng.uniform(0.2, 2.0, c) * rng.choice([-1.0, 1.0], c)
        gamma[rng.random(c) < zero_gamma_frac] = 0.0
        bns.append(
            BNParams(
                gamma=gamma,
                beta=rng.normal(0.0, 0.5, c),
                mean=centre + rng.normal(0.0, spread, c),
                var=rng.uniform(0.5, 2.0, c) * spread**2,
            )
        )
    return with_bn(net, bns)


# ---------------------------------------------------------------------------
# forward


@dataclass
class Intermediates:
    bits: list[np.ndarray] = field(default_factory=list)  # a_k^b per block 0..K-1, uint8 (H, W, C)
    indices: dict[int, np.ndarray] = field(default_factory=dict)  # pool indices by block id
    logits: np.ndarray | None = None


class _Timer:
    def __init__(self, n_blocks: int):
        self.seconds = np.zeros(n_blocks)
        self._t = 0.0

    def start(self):
        self._t = time.perf_counter()

    def stop(self, k: int):
        self.seconds[k] += time.perf_counter() - self._t


def _check_image(net: Network, image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    cfg = net.config
    if img.ndim == 2:
        img = img[..., None]
    if img.shape != (cfg.input_h, cfg.input_w, 1):
        raise ValueError(f"image shape {img.shape} does not match config {cfg.input_h}x{cfg.input_w}x1")
    if not np.all((img >= 0) & (img <= 1)):
        raise ValueError("image values must lie in [0, 1]")
    return img


def _adapter(net: Network, imgs: np.ndarray) -> np.ndarray:
    a0 = batchnorm_infer(conv2d_real(imgs, net.adapter), net.adapter.bn)
    return binarize_bits(a0)


def _forward_real(net, imgs, keep: Intermediates | None, timer: _Timer | None):
    """imgs (N, H, W, 1) -> logits (N, H, W, classes); ``keep`` records image 0."""
    cfg = net.config
    if timer:
        timer.start()
    bits = _adapter(net, imgs)
    if timer:
        timer.stop(0)
    if keep:
        keep.bits.append(bits[0])
    indices = {}
    logits = None
    for k, layer in enumerate(net.blocks, 1):
        block = cfg.blocks[k]
        if timer:
            timer.start()
        if block.has_unpool:
            bits = unpool2x2(bits, indices[block.unpool_source])
        pm = bits.astype(np.float32) * 2.0 - 1.0
        s_pm = conv_same(pm, layer.pm_weights, pad_value=-1.0)
        s = (s_pm.astype(np.float64) + layer.volume) / 2.0
        a = batchnorm_infer(s, layer.bn)
        if block.has_pool:
            a, indices[k] = maxpool2x2(a)
        if block.kind == "classifier_softmax":
            logits = a
        else:
            bits = binarize_bits(a)
        if timer:
            timer.stop(k)
        if keep and logits is None:
            keep.bits.append(bits[0])
            if block.has_pool:
                keep.indices[k] = indices[k][0]
    return logits


def _forward_packed(net, imgs, folded: bool, keep: Intermediates | None, timer: _Timer | None):
    cfg = net.config
    if timer:
        timer.start()
    bits = _adapter(net, imgs)
    words = pack_bits(bits)
    if timer:
        timer.stop(0)
    if keep:
        keep.bits.append(bits[0])
    indices = {}
    logits = None
    for k, layer in enumerate(net.blocks, 1):
        block = cfg.blocks[k]
        if timer:
            timer.start()
        if block.has_unpool:
            words = unpool_words(words, indices[block.unpool_source], layer.in_channels)
        counts = binconv_words(words, layer)
        if block.kind == "classifier_softmax":
            logits = batchnorm_infer(counts, layer.bn)
        elif folded:
            th = net.folded[k - 1]
            n, h, w, c = counts.shape
            if block.has_pool:
                out = np.empty((n, h // 2, w // 2, c), dtype=np.uint8)
                idx = np.empty_like(out)
                _kernels.threshold_pool(counts, th.keys, th.cut, th.polarity, out, idx)
                indices[k] = idx
            else:
                out = np.empty((n, h, w, c), dtype=np.uint8)
                _kernels.threshold(counts, th.cut, th.polarity, out)
            words = pack_bits(out)
        else:
            a = batchnorm_infer(counts, layer.bn)
            if block.has_pool:
                a, indices[k] = maxpool2x2(a)
            words = pack_bits(a > 0)
        if timer:
            timer.stop(k)
        if keep and logits is None:
            keep.bits.append(unpack_bits(words[0], layer.out_channels))
            if block.has_pool:
                keep.indices[k] = indices[k][0]
    return logits


def _run(net: Network, imgs: np.ndarray, mode: str, keep, timer) -> np.ndarray:
    if mode == "real":
        return _forward_real(net, imgs, keep, timer)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    if not net.thresholds_fresh():
        raise StaleThresholdError("BN parameters changed since thresholds were folded; call refold()")
    return _forward_packed(net, imgs, mode == "packed_folded", keep, timer)


def forward_logits(net: Network, image: np.ndarray, mode: str = "packed_folded", keep=None, timer=None):
    """Block-10 outputs (H, W, classes) for one image."""
    return _run(net, _check_image(net, image)[None], mode, keep, timer)[0]


def forward_logits_batch(net: Network, images: np.ndarray, mode: str = "packed_folded", timer=None) -> np.ndarray:
    """Block-10 outputs (N, H, W, classes) for a stack of images, processed together."""
    imgs = np.stack([_check_image(net, img) for img in images])
    return _run(net, imgs, mode, None, timer)


def forward(
    net: Network, image: np.ndarray, mode: str = "packed_folded", keep_intermediates: bool = False
) -> tuple[np.ndarray, Intermediates | None]:
    """Run one 32x128 image; returns the (H, W, classes) salience map and optional intermediates."""
    keep = Intermediates() if keep_intermediates else None
    logits = forward_logits(net, image, mode, keep)
    if keep:
        keep.logits = logits
    return softmax_pixels(logits), keep


def forward_batch(net: Network, images: np.ndarray, mode: str = "packed_folded") -> np.ndarray:
    """Salience maps for a stack of images (N, H, W) or (N, H, W, 1)."""
    return softmax_pixels(forward_logits_batch(net, images, mode))


def predict_labels(p: np.ndarray) -> np.ndarray:
    """Per-pixel argmax; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(p), axis=-1).astype(np.uint8)
