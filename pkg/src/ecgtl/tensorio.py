"""Binary tensor container used for all on-disk tensors.

Layout (little-endian throughout):
  magic   4 bytes  b"ECGT"
  version u8       1
  dtype   u8       1 = float32
  ndim    u8
  dims    u64 * ndim
  payload row-major float32
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ECGT"
VERSION = 1
DTYPE_F32 = 1


def write_tensor(path: str | Path, tensor: np.ndarray) -> None:
    """Write a float32 tensor; other dtypes are cast."""
    # note: ascontiguousarray would promote 0-d arrays to 1-d
    arr = np.asarray(tensor, dtype=np.float32, order="C")
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 7 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic (expected {MAGIC!r})")
    version, dtype, ndim = struct.unpack("<BBB", raw[4:7])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    dims_end = 7 + 8 * ndim
    if len(raw) < dims_end:
        raise FormatError(f"{path}: truncated dimension table")
    dims = struct.unpack(f"<{ndim}Q", raw[7:dims_end])
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    payload = raw[dims_end:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
