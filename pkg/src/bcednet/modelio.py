"""Model files, training checkpoints and memory accounting.

Both file kinds share one container (see ``docs/format.md``)::

    magic "BCED" | u32 version | u32 kind | u64 file length
    u32 config length | config text (utf-8)
    u32 record count | records ...
    u64 checksum of every preceding byte

Everything is little-endian. Binary weights are stored as the packed
uint64 words of ``BinConvLayer.weights``; every real value is a float64.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .netgraph import NetConfig, Network, format_config, parse_config
from .nnlayers import BinConvLayer, BNParams, RealConvLayer

MAGIC = b"BCED"
VERSION = 1
KIND_MODEL = 0
KIND_CHECKPOINT = 1

TAG_REAL_CONV = 0
TAG_BINARY_CONV = 1
TAG_ARRAY = 2

_HEADER = struct.Struct("<4sIIQ")
CHECKSUM_BYTES = 8


class ModelFormatError(ValueError):
    """The file is not a readable model container."""


class ChecksumError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    pass


class TruncatedError(ModelFormatError):
    pass


def checksum(data: bytes) -> int:
    """64-bit FNV-1a style fold over the data as zero-padded little-endian words."""
    pad = (-len(data)) % 8
    words = np.frombuffer(bytes(data) + b"\0" * pad, dtype="<u8").astype(np.uint64)
    return int(_kernels.fnv_fold64(words, np.uint64(len(data))))


# ---------------------------------------------------------------------------
# low-level writer / reader


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u32(self, *vals):
        self.parts.append(struct.pack(f"<{len(vals)}I", *vals))

    def f64(self, arr):
        self.parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def u64(self, arr):
        self.parts.append(np.ascontiguousarray(arr, dtype="<u8").tobytes())

    def text(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.parts.append(raw)

    def body(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, start: int, end: int):
        self.data, self.pos, self.end = data, start, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise ModelFormatError(f"record overruns the payload at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def u64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<u8").astype(np.uint64)

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def _container(kind: int, config: NetConfig, records: _Writer, count: int) -> bytes:
    w = _Writer()
    w.text(format_config(config))
    w.u32(count)
    body = w.body() + records.body()
    length = _HEADER.size + len(body) + CHECKSUM_BYTES
    head = _HEADER.pack(MAGIC, VERSION, kind, length)
    out = head + body
    return out + struct.pack("<Q", checksum(out))


def _open_container(data: bytes, want_kind: int) -> tuple[NetConfig, _Reader, int]:
    if len(data) < _HEADER.size + CHECKSUM_BYTES:
        if data[:4] not in (MAGIC[: len(data)], b""):
            raise ModelFormatError("not a BCED file (bad magic)")
        raise TruncatedError(f"file is truncated: {len(data)} bytes is shorter than the header")
    magic, version, kind, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError("not a BCED file (bad magic)")
    if version != VERSION:
        raise VersionError(f"format version {version} is not supported (this build reads version {VERSION})")
    if len(data) < length:
        raise TruncatedError(f"file is truncated: {len(data)} of {length} bytes present")
    if len(data) > length:
        raise ModelFormatError(f"{len(data) - length} unexpected trailing bytes")
    (stored,) = struct.unpack_from("<Q", data, length - CHECKSUM_BYTES)
    if checksum(data[: length - CHECKSUM_BYTES]) != stored:
        raise ChecksumError("checksum mismatch: the file is corrupted")
    if kind != want_kind:
        names = {KIND_MODEL: "model", KIND_CHECKPOINT: "checkpoint"}
        raise ModelFormatError(f"expected a {names.get(want_kind)} file, found kind {kind}")
    r = _Reader(data, _HEADER.size, length - CHECKSUM_BYTES)
    config = parse_config(r.text())
    return config, r, r.u32()


def _atomic_write(path, data: bytes) -> int:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return len(data)


# ---------------------------------------------------------------------------
# models


def _write_bn(w: _Writer, bn: BNParams):
    w.f64([bn.eps])
    for arr in (bn.gamma, bn.beta, bn.mean, bn.var):
        w.f64(arr)


def _read_bn(r: _Reader, channels: int) -> BNParams:
    eps = float(r.f64(1)[0])
    gamma, beta, mean, var = (r.f64(channels) for _ in range(4))
    return BNParams(gamma, beta, mean, var, eps)


def to_bytes(net: Network) -> bytes:
    w = _Writer()
    a = net.adapter
    w.u32(TAG_REAL_CONV, a.kernel_h, a.kernel_w, a.in_channels, a.out_channels)
    w.f64(a.weights)
    _write_bn(w, a.bn)
    for layer in net.blocks:
        w.u32(TAG_BINARY_CONV, layer.kernel_h, layer.kernel_w, layer.in_channels, layer.out_channels)
        w.u64(layer.weights)
        _write_bn(w, layer.bn)
    return _container(KIND_MODEL, net.config, w, 1 + len(net.blocks))


def from_bytes(data: bytes) -> Network:
    config, r, count = _open_container(bytes(data), KIND_MODEL)
    if count != len(config.blocks):
        raise ModelFormatError(f"{count} layer records for a {len(config.blocks)}-block config")
    adapter, blocks = None, []
    for i in range(count):
        tag, kh, kw, cin, cout = r.u32(5)
        if tag == TAG_REAL_CONV and i == 0:
            weights = r.f64(kh * kw * cin * cout).reshape(kh, kw, cin, cout)
            adapter = RealConvLayer(kh, kw, cin, cout, weights, _read_bn(r, cout))
        elif tag == TAG_BINARY_CONV and i > 0:
            nw = -(-cin // 64)
            words = r.u64(cout * kh * kw * nw).reshape(cout, kh, kw, nw)
            words.setflags(write=False)
            blocks.append(BinConvLayer(kh, kw, cin, cout, words, _read_bn(r, cout)))
        else:
            raise ModelFormatError(f"unexpected layer tag {tag} in record {i}")
    if r.pos != r.end:
        raise ModelFormatError("unparsed bytes after the last record")
    return Network(config, adapter, tuple(blocks))


def save(net: Network, path) -> int:
    """Write ``net`` to ``path`` atomically; returns the byte count."""
    return _atomic_write(path, to_bytes(net))


def load(path) -> Network:
    return from_bytes(Path(path).read_bytes())


def same_network(a: Network, b: Network) -> bool:
    """Bit-for-bit equality of config, weights and BN tuples."""
    if a.config != b.config or len(a.blocks) != len(b.blocks):
        return False
    if not np.array_equal(a.adapter.weights, b.adapter.weights) or not a.adapter.bn.same_as(b.adapter.bn):
        return False
    return all(np.array_equal(x.weights, y.weights) and x.bn.same_as(y.bn) for x, y in zip(a.blocks, b.blocks))


# ---------------------------------------------------------------------------
# checkpoints: named real arrays in the same container


def _write_array(w: _Writer, name: str, arr):
    arr = np.asarray(arr, dtype=np.float64)
    w.u32(TAG_ARRAY)
    w.text(name)
    w.u32(arr.ndim, *arr.shape)
    w.f64(arr)


def save_arrays(path, config: NetConfig, arrays: dict[str, np.ndarray]) -> int:
    w = _Writer()
    for name, arr in arrays.items():
        _write_array(w, name, arr)
    return _atomic_write(path, _container(KIND_CHECKPOINT, config, w, len(arrays)))


def load_arrays(path) -> tuple[NetConfig, dict[str, np.ndarray]]:
    config, r, count = _open_container(Path(path).read_bytes(), KIND_CHECKPOINT)
    out = {}
    for _ in range(count):
        if r.u32() != TAG_ARRAY:
            raise ModelFormatError("checkpoint records must be named arrays")
        name = r.text()
        ndim = r.u32()
        shape = tuple(np.atleast_1d(r.u32(ndim))) if ndim else ()
        out[name] = r.f64(int(np.prod(shape, dtype=np.int64))).reshape(shape)
    return config, out


def save_checkpoint(path, params, state, epoch: int) -> int:
    """Latent sidecar: every trainable array, BN running stats and AdaMax state."""
    arrays = {"epoch": np.float64(epoch), "t": np.float64(state.t), "beta1": np.float64(state.beta1),
              "beta2": np.float64(state.beta2), "eps": np.float64(params.eps), "adapter": params.adapter}
    for group in ("latent", "gamma", "beta", "running_mean", "running_var"):
        for i, arr in enumerate(getattr(params, group)):
            arrays[f"{group}.{i}"] = arr
    for i, (m, u) in enumerate(zip(state.m, state.u)):
        arrays[f"adamax.m.{i}"] = m
        arrays[f"adamax.u.{i}"] = u
    return save_arrays(path, params.config, arrays)


def load_checkpoint(path):
    """Returns (TrainParams, AdaMaxState, epochs completed)."""
    from .trainer import AdaMaxState, TrainParams

    config, a = load_arrays(path)

    def group(name):
        out, i = [], 0
        while f"{name}.{i}" in a:
            out.append(a[f"{name}.{i}"].copy())
            i += 1
        return out

    try:
        params = TrainParams(config, a["adapter"].copy(), group("latent"), group("gamma"), group("beta"),
                             group("running_mean"), group("running_var"), float(a["eps"]))
        state = AdaMaxState(group("adamax.m"), group("adamax.u"), int(a["t"]), float(a["beta1"]), float(a["beta2"]))
    except KeyError as exc:
        raise ModelFormatError(f"checkpoint lacks array {exc}") from None
    if len(params.latent) != len(config.blocks) - 1 or len(state.m) != len(params.trainable()):
        raise ModelFormatError("checkpoint arrays do not match its config")
    return params, state, int(a["epoch"])


# ---------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class SizeReport:
    binary_param_count: int
    binary_packed_bytes: int
    real_param_count: int  # adapter weights
    real_bytes: int
    bn_param_count: int  # gamma, beta, mean, var per channel
    bn_param_bytes: int
    total_bytes: int
    hypothetical_fp32_bytes: int

    @property
    def reduction_ratio(self) -> float:
        return 1.0 - self.total_bytes / self.hypothetical_fp32_bytes

    def lines(self) -> list[str]:
        mb = lambda b: f"{b / 1e6:.2f} MB"
        return [
            f"binary params        {self.binary_param_count:>12,d}",
            f"binary packed bytes  {self.binary_packed_bytes:>12,d}  ({mb(self.binary_packed_bytes)})",
            f"real params          {self.real_param_count:>12,d}",
            f"real bytes (f64)     {self.real_bytes:>12,d}",
            f"bn params            {self.bn_param_count:>12,d}",
            f"bn bytes (f64)       {self.bn_param_bytes:>12,d}",
            f"total bytes          {self.total_bytes:>12,d}  ({mb(self.total_bytes)})",
            f"fp32 equivalent      {self.hypothetical_fp32_bytes:>12,d}  ({mb(self.hypothetical_fp32_bytes)})",
            f"reduction            {100 * self.reduction_ratio:>11.2f}%",
        ]


def size_report(net_or_config) -> SizeReport:
    """Byte accounting from the config alone, so it also works without weights."""
    cfg = net_or_config.config if isinstance(net_or_config, Network) else net_or_config
    b0 = cfg.blocks[0]
    binary = packed = 0
    for k in range(1, len(cfg.blocks)):
        b = cfg.blocks[k]
        cin = cfg.in_channels(k)
        binary += b.kernel_h * b.kernel_w * cin * b.out_channels
        packed += b.out_channels * b.kernel_h * b.kernel_w * (-(-cin // 64)) * 8
    real = b0.kernel_h * b0.kernel_w * b0.out_channels
    bn = 4 * sum(b.out_channels for b in cfg.blocks)
    total = packed + 8 * real + 8 * bn
    return SizeReport(binary, packed, real, 8 * real, bn, 8 * bn, total, 4 * (binary + real + bn))
