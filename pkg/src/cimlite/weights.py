"""The ``CIMW`` flat binary tensor container.

Layout (little-endian)::

    b"CIMW" | u32 version | u32 tensor_count
    per tensor: u32 name_len | utf-8 name | u32 rank | u32 extents[rank] | f32 payload
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"CIMW"
VERSION = 1


def dumps_cimw(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads_cimw(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"CIMW: truncated at byte {pos} (wanted {n} more)")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("CIMW: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"CIMW: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(bytes(take(4 * size)), dtype="<f4").astype(np.float32).reshape(shape)
        out[name] = arr
    if pos != len(view):
        raise FormatError(f"CIMW: {len(view) - pos} trailing bytes")
    return out


def save_cimw(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_cimw(tensors))


def load_cimw(path) -> dict[str, np.ndarray]:
    return loads_cimw(Path(path).read_bytes())
