"""Stand-alone reader/writer for the engine's weight container format.

Implemented from the documented byte layout only (magic 'SSDR', version u32,
tensor count u32; per tensor: name_len u32, UTF-8 name, ndim u32, dims u64
each, float32 data, all little-endian) so it doubles as an independent
cross-check of files the engine produces.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SSDR"
VERSION = 1


class FormatError(Exception):
    pass


def write(path, tensors) -> None:
    items = list(tensors.items()) if hasattr(tensors, "items") else list(tensors)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def read(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = 12
    tensors = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{ndim}Q", blob, offset)
            offset += 8 * ndim
            size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            end = offset + 4 * size
            if end > len(blob):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(dims)
            offset = end
    except struct.error as e:
        raise FormatError(f"{path}: truncated header ({e})") from e
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return tensors
