"""Dense tensor helpers and the ``.mbrt`` binary tensor file format.

Tensors are plain float64 numpy arrays in row-major (C) order; every array
entering the file format or the layers is normalized through
:func:`as_tensor` so there is exactly one canonical layout in the package.

File format (extension ``.mbrt``), all integers little-endian::

    magic    4 bytes  b"MBRT"
    version  u8       1
    rank     u8       >= 1
    dims     rank x u64
    payload  product(dims) x f64, row-major

A write followed by a read reproduces shape and data bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

MAGIC = b"MBRT"
VERSION = 1

_HEADER = struct.Struct("<4sBB")
_DIM = struct.Struct("<Q")


def as_tensor(data) -> np.ndarray:
    """Coerce to a float64, C-contiguous array."""
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64))


def flatten(t: np.ndarray) -> np.ndarray:
    """Flatten to rank 1 in row-major order, leaving the data order unchanged."""
    t = as_tensor(t)
    if t.ndim < 1:
        raise ShapeError("flatten requires rank >= 1")
    return t.reshape(-1)


def unflatten(v: np.ndarray, shape) -> np.ndarray:
    """Inverse of :func:`flatten` for the given shape."""
    v = as_tensor(v)
    shape = tuple(int(d) for d in shape)
    n = int(np.prod(shape))
    if v.ndim != 1 or v.size != n:
        raise ShapeError(f"cannot unflatten {v.shape} into {shape}")
    return v.reshape(shape)


def write_tensor(t: np.ndarray, path) -> None:
    """Write a tensor to ``path`` in the ``.mbrt`` format."""
    t = as_tensor(t)
    if t.ndim < 1 or t.ndim > 255:
        raise ShapeError(f"tensor rank {t.ndim} not writable (need 1..255)")
    if any(d < 1 for d in t.shape):
        raise ShapeError(f"all dimensions must be >= 1, got {t.shape}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, t.ndim))
        for d in t.shape:
            f.write(_DIM.pack(d))
        f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a ``.mbrt`` file, validating magic, version, rank and payload length."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, rank = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if rank < 1:
        raise FormatError(f"{path}: rank 0 is not a valid tensor")
    off = _HEADER.size
    if len(raw) < off + rank * _DIM.size:
        raise FormatError(f"{path}: truncated dimension list")
    dims = []
    for _ in range(rank):
        (d,) = _DIM.unpack_from(raw, off)
        off += _DIM.size
        if d < 1:
            raise FormatError(f"{path}: dimension {d} < 1")
        dims.append(d)
    count = int(np.prod(dims, dtype=np.uint64))
    expected = off + 8 * count
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length mismatch (file {len(raw)} bytes, expected {expected})"
        )
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
    return data.astype(np.float64).reshape(dims)
