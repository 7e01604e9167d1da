"""Bit-exact little-endian tensor container.

Layout:
    magic 'SSDR' (4 bytes), version u32 = 1, tensor_count u32,
    then per tensor: name_len u32, name (UTF-8, no NUL), ndim u32,
    dims u64 * ndim, data float32 * prod(dims), row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SSDR"
VERSION = 1


class ContainerError(Exception):
    """Base class for weight-container failures."""


class BadMagicError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class UnknownTensorError(ContainerError):
    pass


class MissingTensorError(ContainerError):
    pass


class TensorShapeError(ContainerError):
    pass


def write_tensors(path, tensors) -> None:
    """Writes named float32 tensors in iteration order. `tensors` is a mapping
    or an iterable of (name, array) pairs."""
    items = list(tensors.items()) if hasattr(tensors, "items") else list(tensors)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items:
            arr = np.asarray(arr)
            if arr.dtype != np.float32:
                raise ContainerError(f"tensor {name!r} must be float32, got {arr.dtype}")
            encoded = name.encode("utf-8")
            if b"\x00" in encoded or not encoded:
                raise ContainerError(f"invalid tensor name {name!r}")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, count, path, what):
    data = f.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"{path}: truncated while reading {what}")
    return data


def read_tensors(path, mmap: bool = False) -> dict:
    """Reads all tensors into a name -> float32 array dict, preserving file order.

    With mmap=True the tensor data stays on disk and is mapped read-only,
    which keeps large feature caches out of memory.
    """
    path = Path(path)
    tensors = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        version, count = struct.unpack("<II", _read_exact(f, 8, path, "header"))
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported version {version}")
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, path, f"tensor {i} name length"))
            name = _read_exact(f, name_len, path, f"tensor {i} name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, path, f"{name}: ndim"))
            dims = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim, path, f"{name}: dims"))
            size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            if mmap:
                offset = f.tell()
                arr = np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=tuple(dims))
                f.seek(offset + 4 * size)
                if f.tell() > path.stat().st_size:
                    raise TruncatedFileError(f"{path}: truncated while reading {name} data")
            else:
                raw = _read_exact(f, 4 * size, path, f"{name} data")
                arr = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
            if name in tensors:
                raise ContainerError(f"{path}: duplicate tensor name {name!r}")
            tensors[name] = arr
        if f.read(1):
            raise ContainerError(f"{path}: trailing bytes after last tensor")
    return tensors


def validate_names_and_shapes(tensors: dict, expected: dict, path="container") -> None:
    """Checks a loaded container against an expected name -> shape table."""
    unknown = sorted(set(tensors) - set(expected))
    if unknown:
        raise UnknownTensorError(f"{path}: unknown tensor names {unknown}")
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise MissingTensorError(f"{path}: missing tensors {missing}")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise TensorShapeError(
                f"{path}: tensor {name!r} has shape {tuple(tensors[name].shape)}, "
                f"expected {tuple(shape)}"
            )
