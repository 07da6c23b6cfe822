"""The ``SHAW`` weight container.

Layout (all integers u32 little-endian)::

    b"SHAW" | version
    repeated until EOF:
        name_len | name (UTF-8) | rank | dim_0 .. dim_{rank-1} | float32 LE payload
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SHAW"
VERSION = 1
_U32 = struct.Struct("<I")


class WeightFormatError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(VERSION))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf.write(_U32.pack(len(raw)))
        buf.write(raw)
        buf.write(_U32.pack(arr.ndim))
        for d in arr.shape:
            buf.write(_U32.pack(d))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    """Parse a container; values come back as float32 arrays in file order."""
    if data[:4] != MAGIC:
        raise WeightFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise WeightFormatError("truncated header")
    (version,) = _U32.unpack_from(data, 4)
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise WeightFormatError(f"truncated record at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = _U32.unpack(take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = _U32.unpack(take(4))
        shape = tuple(_U32.unpack(take(4))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        if name in out:
            raise WeightFormatError(f"duplicate tensor {name!r}")
        out[name] = arr
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
