"""Binary tensor container used for checkpoints.

Layout (all little-endian)::

    b"SCCT" | version:u32 | rank:u32 | dims:u64 * rank | data:f64 * prod(dims)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SCCT"
VERSION = 1


class ContainerError(ValueError):
    pass


def dumps(array) -> bytes:
    arr = np.asarray(array, dtype="<f8")
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise ContainerError("not an SCCT tensor container")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    off = 12 + 8 * rank
    if len(buf) < off:
        raise ContainerError("truncated header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 12)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) != off + 8 * count:
        raise ContainerError(f"payload holds {(len(buf) - off) // 8} values, header says {count}")
    return np.frombuffer(buf, dtype="<f8", offset=off).astype(np.float64).reshape(dims)


def save_tensor(path, array) -> None:
    Path(path).write_bytes(dumps(array))


def load_tensor(path) -> np.ndarray:
    return loads(Path(path).read_bytes())


def element_count(path) -> int:
    """Number of f64 values in a container, read from its header only."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if head[:4] != MAGIC:
            raise ContainerError(f"{path}: not an SCCT tensor container")
        _, rank = struct.unpack_from("<II", head, 4)
        dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    return int(np.prod(dims, dtype=np.int64)) if rank else 1
