"""Binary checkpoint format.

Little-endian layout: magic "CGK1", then per-tensor records of
(u32 name length, utf-8 name, u32 rank, u32 dims..., float64 payload).
Tensors are written in sorted-name order so files are byte-deterministic.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from ..errors import CheckpointError
from .tensor import Tensor

MAGIC = b"CGK1"


def save_checkpoint(path, tensors: Mapping[str, "Tensor | np.ndarray"]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name in sorted(tensors):
            value = tensors[name]
            arr = np.ascontiguousarray(
                value.data if isinstance(value, Tensor) else value, dtype="<f8"
            )
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}")
    offset = 4
    total = len(blob)

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > total:
            raise CheckpointError("truncated checkpoint")
        piece = blob[offset : offset + count]
        offset += count
        return piece

    tensors: dict[str, np.ndarray] = {}
    while offset < total:
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = take(8 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    if offset != total:
        raise CheckpointError("trailing bytes after final record")
    return tensors
