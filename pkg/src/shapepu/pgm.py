"""Binary PGM (P5) reading and writing, 8- and 16-bit, byte-exact round trips."""

from __future__ import annotations

import numpy as np


class PgmError(ValueError):
    pass


def encode_pgm(array: np.ndarray, maxval: int | None = None) -> bytes:
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise PgmError(f"PGM needs a 2-D array, got shape {arr.shape}")
    if maxval is None:
        maxval = 255 if arr.dtype == np.uint8 else 65535
    if not 0 < maxval < 65536:
        raise PgmError(f"maxval {maxval} out of range")
    if arr.size and (arr.min() < 0 or arr.max() > maxval):
        raise PgmError(f"values outside 0..{maxval}")
    h, w = arr.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + arr.astype(dtype).tobytes()


def write_pgm(path, array: np.ndarray, maxval: int | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(array, maxval))


def _tokens(buf: bytes, count: int):
    """Yield ``count`` header tokens and the offset of the raster after them."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError("truncated header")
        out.append(buf[start:pos])
    return out, pos + 1  # exactly one whitespace byte precedes the raster


def decode_pgm(buf: bytes) -> tuple:
    """Return ``(array, maxval)``; 16-bit rasters come back as uint16."""
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    if magic != b"P5":
        raise PgmError(f"unsupported magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * dtype.itemsize
    raster = buf[offset : offset + n]
    if len(raster) != n:
        raise PgmError(f"raster has {len(raster)} bytes, expected {n}")
    arr = np.frombuffer(raster, dtype=dtype).reshape(h, w)
    return arr.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def read_pgm(path) -> tuple:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())
