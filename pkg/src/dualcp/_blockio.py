"""Framed binary blocks shared by the bank, checkpoint, and memory files.

A file is: 4-byte magic | u64 JSON header length | UTF-8 JSON header |
a sequence of matrix blocks. Each block is u32 rows | u32 cols | rows*cols
f64 values, row-major little-endian.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from . import errors


def write_header(f, magic: bytes, header: dict) -> None:
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    f.write(magic)
    f.write(struct.pack("<Q", len(payload)))
    f.write(payload)


def read_header(f, magic: bytes) -> dict:
    got = f.read(4)
    if got != magic:
        raise errors.CorruptHeader(f"expected magic {magic!r}, got {got!r}")
    raw_len = f.read(8)
    if len(raw_len) != 8:
        raise errors.Truncated("missing header length")
    (n,) = struct.unpack("<Q", raw_len)
    payload = f.read(n)
    if len(payload) != n:
        raise errors.Truncated("header shorter than declared")
    try:
        header = json.loads(payload.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise errors.BadManifest(f"header JSON invalid: {exc}") from exc
    if not isinstance(header, dict):
        raise errors.BadManifest("header must be a JSON object")
    return header


def write_block(f, arr: np.ndarray) -> None:
    mat = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    rows, cols = mat.shape
    f.write(struct.pack("<II", rows, cols))
    f.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def read_block(f) -> np.ndarray:
    raw = f.read(8)
    if len(raw) != 8:
        raise errors.Truncated("missing block shape")
    rows, cols = struct.unpack("<II", raw)
    nbytes = 8 * rows * cols
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise errors.Truncated("block data truncated")
    return np.frombuffer(data, dtype="<f8").reshape(rows, cols).copy()
