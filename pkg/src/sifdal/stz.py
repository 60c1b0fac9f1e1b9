"""The STZ1 tensor container.

Layout (all integers little-endian)::

    b"STZ1" | u32 count | count x ( u16 name_len | name utf-8 | u8 rank
                                    | rank x u32 dim | prod(dims) x f64 )

Entries are written in the mapping's iteration order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError

MAGIC = b"STZ1"


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise DataError(f"tensor {name!r} has rank {arr.ndim} > 255")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    if bytes(view[:4]) != MAGIC:
        raise DataError("not an STZ1 container (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise DataError(f"truncated STZ1 container at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(bytes(take(8 * n)), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(dims)
    if pos != len(view):
        raise DataError(f"{len(view) - pos} trailing bytes after last STZ1 entry")
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
