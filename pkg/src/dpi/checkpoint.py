"""Checkpoint container for named parameter tensors.

Layout (all integers little-endian):

    magic        8 bytes   b"DPICKPT1"
    tensor count uint32
    per tensor:  uint16 name length, utf-8 name,
                 uint8 dtype tag (0 = float32), uint8 ndim, ndim * uint32 dims
    payload      raw float32 data, tensors concatenated in header order
    checksum     uint64 FNV-1a of every preceding byte

Parameters are trained in float64 but stored as float32; loading returns
float64 arrays holding the float32 values exactly, so save -> load -> save
is byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"DPICKPT1"
_DTYPE_F32 = 0

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", len(params))]
    payload = []
    for name, arr in params.items():
        arr32 = np.asarray(arr, dtype="<f4")  # keeps 0-d shapes intact
        if arr32.ndim and not arr32.flags.c_contiguous:
            arr32 = np.ascontiguousarray(arr32)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", _DTYPE_F32, arr32.ndim))
        parts.append(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
        payload.append(arr32.tobytes())
    body = b"".join(parts) + b"".join(payload)
    Path(path).write_bytes(body + struct.pack("<Q", fnv1a64(body)))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if fnv1a64(body) != stored:
        raise DataError(f"{path}: checksum mismatch (corrupted checkpoint)")

    pos = len(MAGIC)
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    headers = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + name_len].decode("utf-8")
        pos += name_len
        dtype_tag, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        if dtype_tag != _DTYPE_F32:
            raise DataError(f"{path}: unknown dtype tag {dtype_tag} for tensor {name!r}")
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        headers.append((name, shape))

    params: dict[str, np.ndarray] = {}
    for name, shape in headers:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 4 * n
        if pos + nbytes > len(body):
            raise DataError(f"{path}: payload shorter than header declares")
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape)
        params[name] = arr.astype(np.float64)
        pos += nbytes
    if pos != len(body):
        raise DataError(f"{path}: trailing bytes after declared payload")
    return params
