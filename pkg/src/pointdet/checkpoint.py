"""Versioned binary container for named float tensors.

Layout (little-endian): magic ``PDET``, u16 major, u16 minor, u32 tensor
count, then per tensor a u16 name length, the UTF-8 name, u8 ndim, u32 dims,
and the row-major float64 payload.  Readers accept any file within the same
major version and ignore tensor names they do not know, so minor versions
may add entries without breaking older readers.
"""
from __future__ import annotations

import struct

import numpy as np

__all__ = ["MAGIC", "VERSION", "save_tensors", "load_tensors", "CheckpointError"]

MAGIC = b"PDET"
VERSION = (1, 0)


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HHI", VERSION[0], VERSION[1], len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint file: bad magic {data[:4]!r}")
    major, minor, count = struct.unpack_from("<HHI", data, 4)
    if major != VERSION[0]:
        raise CheckpointError(
            f"checkpoint major version {major} incompatible with {VERSION[0]}"
        )
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return out
