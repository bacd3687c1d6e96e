"""Tensor file format.

Layout: magic ``DCST``, version byte 0x01, rank byte, little-endian uint32
dims, then little-endian float32 data in row-major order. Values live as
float64 in memory and round-trip through 32 bits on disk.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import IoError
from .tensor import Tensor
from .util import atomic_write_bytes

MAGIC = b"DCST"
VERSION = 1

# Refuse absurd headers before allocating.
_MAX_ELEMENTS = 1 << 28


def tensor_bytes(t: Tensor) -> bytes:
    if t.neg_inf_ok:
        raise IoError("bias tensors carry the -inf sentinel and are not serializable")
    dims = t.shape
    if len(dims) > 255:
        raise IoError(f"rank {len(dims)} exceeds the format limit of 255")
    if any(d >= 1 << 32 for d in dims):
        raise IoError(f"dimension too large for uint32: {dims}")
    header = MAGIC + bytes([VERSION, len(dims)]) + struct.pack(f"<{len(dims)}I", *dims)
    return header + t.data.astype("<f4").tobytes(order="C")


def write_tensor(path: str | Path, t: Tensor) -> None:
    """Serialize atomically (temp file then rename)."""
    try:
        atomic_write_bytes(path, tensor_bytes(t))
    except OSError as err:
        raise IoError(f"cannot write {path}: {err}") from err


def read_tensor(path: str | Path) -> Tensor:
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise IoError(f"cannot read {path}: {err}") from err
    return tensor_from_bytes(raw, source=str(path))


def tensor_from_bytes(raw: bytes, *, source: str = "<bytes>") -> Tensor:
    if len(raw) < 6:
        raise IoError(f"{source}: truncated header")
    if raw[:4] != MAGIC:
        raise IoError(f"{source}: bad magic {raw[:4]!r}")
    if raw[4] != VERSION:
        raise IoError(f"{source}: unsupported version {raw[4]}")
    rank = raw[5]
    dim_end = 6 + 4 * rank
    if len(raw) < dim_end:
        raise IoError(f"{source}: truncated dimension list")
    dims = struct.unpack(f"<{rank}I", raw[6:dim_end]) if rank else ()
    if any(d == 0 for d in dims):
        raise IoError(f"{source}: zero-sized dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_ELEMENTS:
        raise IoError(f"{source}: element count {count} exceeds the reader limit")
    payload = raw[dim_end:]
    if len(payload) != 4 * count:
        raise IoError(f"{source}: payload holds {len(payload)} bytes, dims {dims} need {4 * count}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
    try:
        return Tensor(data)
    except ValueError as err:
        raise IoError(f"{source}: {err}") from err
