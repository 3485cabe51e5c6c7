"""Binary checkpoint container.

Layout (all integers little-endian ``uint32``)::

    b"GEVT" | version | record*

    record := name_len | name (utf-8) | rank | dim * rank | float32 * prod(dims)

Records are read until end of file. Values are always stored as 32-bit floats.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"GEVT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 8:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"truncated record at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    while pos < len(buf):
        (nlen,) = read("<I")
        if pos + nlen > len(buf):
            raise CheckpointError(f"truncated name at byte {pos}")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = read("<I")
        shape = read(f"<{rank}I") if rank else ()
        count = int(np.prod(shape, dtype=np.int64))
        if pos + 4 * count > len(buf):
            raise CheckpointError(f"truncated data for {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
