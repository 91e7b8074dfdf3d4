"""Binary-constrained training.

The forward pass runs the +/-1 algebra in floating point: binary weights are
``sign(latent)`` (0 maps to -1) and activations are ``sign(BN output)``.
Gradients reach the latent weights straight through the sign, and reach
activations through the saturating straight-through estimator (pass where
|a| <= 1). Batch norm uses mini-batch statistics and acts on the popcount
``s = (s_pm + volume) / 2`` so its running statistics drop straight into the
packed engine.

Setting ``activation="htanh"`` swaps every activation sign for a hard tanh.
The straight-through backward pass is then the exact gradient of that
surrogate, which is what the finite-difference checks exercise.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .netgraph import NetConfig, Network, assemble, forward_logits_batch, init_parameters, predict_labels
from .nnlayers import BNParams, DEFAULT_EPS, conv_same, im2col_batch, image_chunks

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 20
    lr: float = 0.002
    lr_decay: float = 0.9  # multiplied in after every epoch
    beta1: float = 0.9
    beta2: float = 0.999
    bn_momentum: float = 0.9
    eps: float = DEFAULT_EPS
    dtype: str = "float32"
    eval_batch: int = 50
    # >0: reset BN running statistics to the average batch statistics over this
    # many training images (current weights, no momentum lag); done before each
    # validation and after the last epoch
    recalibrate: int = 0


@dataclass
class TrainParams:
    """Everything the optimizer touches, plus BN running statistics.

    ``latent`` holds one (kh, kw, in, out) array per binary block, kept in [-1, 1].
    ``gamma``/``beta``/``running_*`` have one entry per block, adapter first.
    """

    config: NetConfig
    adapter: np.ndarray
    latent: list[np.ndarray]
    gamma: list[np.ndarray]
    beta: list[np.ndarray]
    running_mean: list[np.ndarray]
    running_var: list[np.ndarray]
    eps: float = DEFAULT_EPS

    @classmethod
    def init(cls, config: NetConfig, seed: int = 0) -> "TrainParams":
        """Same draws as ``netgraph.build(config, seed)``, so the signs agree."""
        adapter, latent = init_parameters(config, seed)
        ch = [b.out_channels for b in config.blocks]
        return cls(
            config,
            adapter,
            latent,
            [np.ones(c) for c in ch],
            [np.zeros(c) for c in ch],
            [np.zeros(c) for c in ch],
            [np.ones(c) for c in ch],
        )

    @classmethod
    def from_network(cls, net: Network, scale: float = 0.1) -> "TrainParams":
        """Latents of magnitude ``scale`` carrying the network's weight signs."""
        bns = [layer.bn for layer in net.layers]
        return cls(
            net.config,
            np.array(net.adapter.weights, dtype=np.float64),
            [scale * (2.0 * layer.weight_bits.astype(np.float64) - 1.0) for layer in net.blocks],
            [bn.gamma.copy() for bn in bns],
            [bn.beta.copy() for bn in bns],
            [bn.mean.copy() for bn in bns],
            [bn.var.copy() for bn in bns],
            bns[0].eps,
        )

    def trainable(self) -> list[np.ndarray]:
        """Optimizer view, in a fixed order: adapter, latents, gammas, betas."""
        return [self.adapter, *self.latent, *self.gamma, *self.beta]

    def clip_flags(self) -> list[bool]:
        k = len(self.latent)
        return [False] + [True] * k + [False] * (2 * len(self.gamma))

    def binary_weights(self) -> list[np.ndarray]:
        return binarize_weights(self.latent)

    def bn_params(self) -> list[BNParams]:
        return [
            BNParams(g.copy(), b.copy(), m.copy(), v.copy(), self.eps)
            for g, b, m, v in zip(self.gamma, self.beta, self.running_mean, self.running_var)
        ]

    def to_network(self) -> Network:
        return assemble(self.config, self.adapter, self.binary_weights(), self.bn_params())

    def copy(self) -> "TrainParams":
        return TrainParams(
            self.config,
            self.adapter.copy(),
            [a.copy() for a in self.latent],
            [a.copy() for a in self.gamma],
            [a.copy() for a in self.beta],
            [a.copy() for a in self.running_mean],
            [a.copy() for a in self.running_var],
            self.eps,
        )


def binarize_weights(latent) -> list[np.ndarray]:
    """Bit 1 where latent > 0; zero and negatives give bit 0."""
    return [(np.asarray(w) > 0).astype(np.uint8) for w in latent]


# ---------------------------------------------------------------------------
# loss


def loss_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean pixel-wise cross-entropy and its gradient w.r.t. the logits.

    ``logits`` (..., H, W, C); ``labels`` (..., H, W). The mean runs over every
    pixel of every image, matching the 1/(N*W*H) normalisation.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    c = z.shape[-1]
    if y.shape != z.shape[:-1]:
        raise ValueError(f"labels {y.shape} do not match logits {z.shape[:-1]}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"labels must lie in 0..{c - 1}")
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_norm
    count = y.size
    picked = np.take_along_axis(log_p, y[..., None].astype(np.intp), axis=-1)[..., 0]
    loss = -picked.sum() / count
    grad = np.exp(log_p)
    np.put_along_axis(grad, y[..., None].astype(np.intp), np.take_along_axis(grad, y[..., None].astype(np.intp), axis=-1) - 1.0, axis=-1)
    return float(loss), grad / count


def ste_binarize_backward(upstream_grad: np.ndarray, pre_activation: np.ndarray) -> np.ndarray:
    """Pass the gradient where |a| <= 1, zero it elsewhere."""
    return np.where(np.abs(pre_activation) <= 1.0, upstream_grad, 0.0).astype(np.result_type(upstream_grad), copy=False)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdaMaxState:
    m: list[np.ndarray]
    u: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999

    @classmethod
    def zeros_like(cls, params, beta1: float = 0.9, beta2: float = 0.999) -> "AdaMaxState":
        return cls([np.zeros_like(p, dtype=np.float64) for p in params], [np.zeros_like(p, dtype=np.float64) for p in params], 0, beta1, beta2)


class NonFiniteGradient(FloatingPointError):
    pass


def adamax_step(state: AdaMaxState, params, grads, lr: float, clip=False):
    """One AdaMax update in place; returns ``params``.

    ``clip`` is a bool or one bool per array; flagged arrays are clipped to [-1, 1].
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    for i, g in enumerate(grads):
        if np.shape(g) != np.shape(params[i]):
            raise ValueError(f"gradient {i} has shape {np.shape(g)}, parameter {np.shape(params[i])}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter array {i}; step aborted")
    flags = clip if isinstance(clip, (list, tuple)) else [clip] * len(params)
    state.t += 1
    step = lr / (1.0 - state.beta1**state.t)
    for p, g, m, u, c in zip(params, grads, state.m, state.u, flags):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        p -= step * m / np.maximum(u, 1e-12)
        if c:
            np.clip(p, -1.0, 1.0, out=p)
    return params


# ---------------------------------------------------------------------------
# forward / backward on a mini-batch


def _bn_forward(s, gamma, beta, eps):
    axes = tuple(range(s.ndim - 1))
    mean = s.mean(axis=axes)
    var = s.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (s - mean) * inv
    return xhat * gamma + beta, xhat, inv, mean, var


def _bn_backward(dy, xhat, inv, gamma):
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    m = dy[..., 0].size
    dx = (gamma * inv) * (dy - dbeta / m - xhat * (dgamma / m))
    return dx, dgamma, dbeta


def _activate(a, activation):
    if activation == "sign":
        return np.where(a > 0, 1.0, -1.0).astype(a.dtype)
    return np.clip(a, -1.0, 1.0)


def _pool_forward(a):
    n, h, w, c = a.shape
    win = a.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = np.argmax(win, axis=-1)
    pooled = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return pooled, idx.astype(np.uint8)


def _corner_scatter(values, idx, fill):
    """(N, h, w, C) values -> (N, 2h, 2w, C), value at its corner, ``fill`` elsewhere."""
    n, h, w, c = values.shape
    out = np.empty((n, h, 2, w, 2, c), dtype=values.dtype)
    for q in range(4):
        dy, dx = divmod(q, 2)
        np.copyto(out[:, :, dy, :, dx, :], np.where(idx == q, values, values.dtype.type(fill)))
    return out.reshape(n, 2 * h, 2 * w, c)


def _corner_gather(grad, idx):
    """Inverse routing of :func:`_corner_scatter`: pick each window's recorded corner."""
    n, h, w, c = idx.shape
    g = grad.reshape(n, h, 2, w, 2, c)
    out = np.zeros(idx.shape, dtype=grad.dtype)
    for q in range(4):
        dy, dx = divmod(q, 2)
        np.copyto(out, g[:, :, dy, :, dx, :], where=idx == q)
    return out


def pool_backward(upstream: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Route pooled gradients to the recorded argmax corners; zeros elsewhere."""
    return _corner_scatter(upstream, idx, 0.0)


def unpool_backward(upstream: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return _corner_gather(upstream, idx)


def _conv_weight_grad(x, dy, kh, kw, pad_value):
    """dW (kh, kw, C, F) for a same-padded cross-correlation."""
    c = x.shape[-1]
    f = dy.shape[-1]
    dw = np.zeros((kh * kw * c, f), dtype=np.float64)
    for sl in image_chunks(x, kh, kw):
        cols = im2col_batch(x[sl], kh, kw, pad_value)
        dw += cols.T @ dy[sl].reshape(-1, f)
    return dw.reshape(kh, kw, c, f)


def _conv_input_grad(dy, w):
    """dX for a same-padded cross-correlation with odd kernel ``w`` (kh, kw, C, F)."""
    flipped = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    return conv_same(dy, flipped, pad_value=0.0)


@dataclass
class _Block:
    x: np.ndarray  # conv input (after unpool)
    w: np.ndarray  # weights actually used (+/-1 or real)
    xhat: np.ndarray
    inv: np.ndarray
    a: np.ndarray | None = None  # pre-activation after pooling (None for the logits block)
    idx: np.ndarray | None = None
    batch_mean: np.ndarray | None = None
    batch_var: np.ndarray | None = None


def train_forward(p: TrainParams, images: np.ndarray, activation: str = "sign", dtype="float32"):
    """Forward with batch statistics. Returns (logits, caches)."""
    cfg = p.config
    dt = np.dtype(dtype)
    x = np.asarray(images, dtype=dt)
    if x.ndim == 3:
        x = x[..., None]
    caches = []
    s0 = conv_same(x, p.adapter.astype(dt), pad_value=0.0)
    a0, xhat, inv, mean, var = _bn_forward(s0, p.gamma[0].astype(dt), p.beta[0].astype(dt), p.eps)
    caches.append(_Block(x, p.adapter.astype(dt), xhat, inv, a0, None, mean, var))
    h = _activate(a0, activation)
    logits = None
    for k, lat in enumerate(p.latent, 1):
        block = cfg.blocks[k]
        if block.has_unpool:
            h = _corner_scatter(h, caches[block.unpool_source].idx, -1.0)
        w = np.where(lat > 0, 1.0, -1.0).astype(dt)
        s_pm = conv_same(h, w, pad_value=-1.0)
        volume = w.shape[0] * w.shape[1] * w.shape[2]
        s = (s_pm + volume) * dt.type(0.5)
        a, xhat, inv, mean, var = _bn_forward(s, p.gamma[k].astype(dt), p.beta[k].astype(dt), p.eps)
        blk = _Block(h, w, xhat, inv, batch_mean=mean, batch_var=var)
        if block.has_pool:
            a, blk.idx = _pool_forward(a)
        caches.append(blk)
        if block.kind == "classifier_softmax":
            logits = a
        else:
            blk.a = a
            h = _activate(a, activation)
    return logits, caches


def backward(p: TrainParams, images, labels, activation: str = "sign", dtype="float32"):
    """Loss and gradients for one mini-batch.

    Returns ``(loss, grads, caches)`` where ``grads`` follows
    ``TrainParams.trainable()`` order: adapter, latents, gammas, betas.
    """
    cfg = p.config
    logits, caches = train_forward(p, images, activation, dtype)
    loss, dz = loss_ce(logits, labels)
    dt = np.dtype(dtype)
    n_blocks = len(cfg.blocks)
    dgamma = [None] * n_blocks
    dbeta = [None] * n_blocks
    dlatent = [None] * (n_blocks - 1)
    grad = dz.astype(dt)  # gradient w.r.t. the current block's output (pre-activation for the last block)
    for k in range(n_blocks - 1, -1, -1):
        block = cfg.blocks[k]
        blk = caches[k]
        if block.kind != "classifier_softmax":
            # grad is w.r.t. the activation; the STE mask is also the exact hard-tanh derivative
            grad = ste_binarize_backward(grad, blk.a)
        if block.has_pool:
            grad = pool_backward(grad, blk.idx)
        ds, dgamma[k], dbeta[k] = _bn_backward(grad, blk.xhat, blk.inv, p.gamma[k].astype(dt))
        if k == 0:
            kh, kw = p.adapter.shape[:2]
            dw = _conv_weight_grad(blk.x, ds, kh, kw, 0.0)
            adapter_grad = dw
            break
        ds_pm = ds * dt.type(0.5)
        kh, kw = blk.w.shape[:2]
        dlatent[k - 1] = _conv_weight_grad(blk.x, ds_pm, kh, kw, -1.0)
        dx = _conv_input_grad(ds_pm, blk.w)
        if block.has_unpool:
            dx = unpool_backward(dx, caches[block.unpool_source].idx)
        grad = dx
    grads = [adapter_grad, *dlatent, *dgamma, *dbeta]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    return loss, grads, caches


def update_running_stats(p: TrainParams, caches, momentum: float) -> None:
    for k, blk in enumerate(caches):
        p.running_mean[k] = momentum * p.running_mean[k] + (1 - momentum) * blk.batch_mean.astype(np.float64)
        p.running_var[k] = momentum * p.running_var[k] + (1 - momentum) * blk.batch_var.astype(np.float64)


def recalibrate_bn(p: TrainParams, images, batch_size: int = 20, dtype="float32") -> None:
    """Set running statistics to the mean of per-batch statistics over ``images``.

    Uses the current weights only, so the result does not lag behind training
    the way the momentum average does. Batches match the training batch size
    so each layer sees inputs normalised the way it was trained.
    """
    n = len(images)
    if n == 0:
        raise ValueError("no images to recalibrate on")
    k = len(p.config.blocks)
    mean = [np.zeros_like(m) for m in p.running_mean]
    var = [np.zeros_like(v) for v in p.running_var]
    for i in range(0, n, batch_size):
        chunk = images[i : i + batch_size]
        _, caches = train_forward(p, chunk, "sign", dtype)
        w = len(chunk) / n
        for j in range(k):
            mean[j] += w * caches[j].batch_mean.astype(np.float64)
            var[j] += w * caches[j].batch_var.astype(np.float64)
    p.running_mean[:] = mean
    p.running_var[:] = var


def batch_loss(p: TrainParams, images, labels, batch_size=20, dtype="float32") -> float:
    """Mean training-mode loss over a dataset, without touching any parameter."""
    total, count = 0.0, 0
    for i in range(0, len(images), batch_size):
        logits, _ = train_forward(p, images[i : i + batch_size], "sign", dtype)
        loss, _ = loss_ce(logits, labels[i : i + batch_size])
        n = len(images[i : i + batch_size])
        total += loss * n
        count += n
    return total / count


# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_accuracy: float | None
    lr: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)

    def as_rows(self) -> list[tuple]:
        return [(e.epoch, e.loss, e.val_accuracy, e.lr, e.seconds) for e in self.epochs]

    def same_numbers(self, other: "TrainReport") -> bool:
        """Equality ignoring wall time."""
        strip = lambda r: [(e.epoch, e.loss, e.val_accuracy, e.lr) for e in r.epochs]
        return strip(self) == strip(other)


@dataclass
class FitResult:
    network: Network
    params: TrainParams
    state: AdaMaxState
    report: TrainReport
    epochs_done: int


def pixel_accuracy_of(net: Network, images, labels, mode: str = "packed_folded", batch: int = 50) -> float:
    correct = 0
    for i in range(0, len(images), batch):
        pred = predict_labels(forward_logits_batch(net, images[i : i + batch], mode))
        correct += int((pred == labels[i : i + batch]).sum())
    return correct / np.asarray(labels).size


def fit(
    params: TrainParams,
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray] | None,
    epochs: int,
    seed: int = 0,
    config: TrainConfig | None = None,
    state: AdaMaxState | None = None,
    start_epoch: int = 0,
    on_epoch=None,
) -> FitResult:
    """Train ``params`` in place for ``epochs`` epochs.

    Shuffling uses ``seed`` and the absolute epoch number, so a resumed run
    (``start_epoch`` > 0 with the saved optimizer state) continues exactly
    where it stopped.
    """
    cfg = config or TrainConfig()
    images, labels = train
    if len(images) == 0:
        raise ValueError("training set is empty")
    if val is not None and len(val[0]) == 0:
        raise ValueError("validation set is empty")
    state = state or AdaMaxState.zeros_like(params.trainable(), cfg.beta1, cfg.beta2)
    report = TrainReport()
    for epoch in range(start_epoch, start_epoch + epochs):
        t0 = time.perf_counter()
        lr = cfg.lr * cfg.lr_decay**epoch
        order = np.random.default_rng([seed, epoch]).permutation(len(images))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            sel = order[b : b + cfg.batch_size]
            loss, grads, caches = backward(params, images[sel], labels[sel], "sign", cfg.dtype)
            if not np.isfinite(loss):
                raise NonFiniteGradient(f"loss became {loss} in epoch {epoch}")
            adamax_step(state, params.trainable(), grads, lr, params.clip_flags())
            update_running_stats(params, caches, cfg.bn_momentum)
            losses.append(loss * len(sel))
        mean_loss = float(np.sum(losses) / len(order))
        if cfg.recalibrate and (val is not None or epoch == start_epoch + epochs - 1):
            recalibrate_bn(params, images[: cfg.recalibrate], cfg.batch_size, cfg.dtype)
        acc = None
        if val is not None:
            acc = pixel_accuracy_of(params.to_network(), *val)
        rec = EpochRecord(epoch + 1, mean_loss, acc, lr, time.perf_counter() - t0)
        report.epochs.append(rec)
        log.info("epoch %d loss %.4f val_acc %s lr %.5f (%.1fs)", rec.epoch, rec.loss, acc, lr, rec.seconds)
        if on_epoch:
            on_epoch(rec)
    return FitResult(params.to_network(), params, state, report, start_epoch + epochs)
