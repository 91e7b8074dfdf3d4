"""Minimal binary PGM (P5, 8-bit) reader and writer."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


def encode_pgm(pixels: np.ndarray) -> bytes:
    """Serialize a 2-D uint8 array as a P5 PGM with maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError(f"expected 2-D uint8 array, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """Parse a P5 PGM. Comments in the header are skipped; maxval must be <= 255."""
    fields: list[bytes] = []
    pos = 0
    n = len(data)
    while len(fields) < 4:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        fields.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    if fields[0] != b"P5":
        raise ValueError(f"unsupported PNM magic {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if not 0 < maxval <= 255:
        raise ValueError(f"only 8-bit PGM supported (maxval={maxval})")
    raster = data[pos : pos + w * h]
    if len(raster) != w * h:
        raise ValueError("truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(pixels))


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def to_gray8(values: np.ndarray) -> np.ndarray:
    """Map reals in [0, 1] to 0..255, rounding half up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)
