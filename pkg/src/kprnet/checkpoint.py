"""``KPRW`` tensor container.

Layout (little-endian): magic ``KPRW``, u32 version, u32 tensor count, then per
tensor: u16 name length, UTF-8 name, u8 rank, ``rank`` x u32 dims, float32 data
in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from kprnet.errors import FormatError

KPRW_MAGIC = b"KPRW"
KPRW_VERSION = 1


def write_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [KPRW_MAGIC, struct.pack("<II", KPRW_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be stored")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def read_tensors(payload: bytes) -> dict[str, np.ndarray]:
    if payload[:4] != KPRW_MAGIC:
        raise FormatError("not a KPRW checkpoint")
    try:
        version, count = struct.unpack_from("<II", payload, 4)
        if version != KPRW_VERSION:
            raise FormatError(f"unsupported KPRW version {version}")
        pos = 12
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", payload, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", payload, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(payload):
                raise FormatError(f"tensor {name!r} runs past the end of the payload")
            tensors[name] = (
                np.frombuffer(payload, dtype="<f4", count=size, offset=pos)
                .reshape(shape)
                .astype(np.float32)
            )
            pos += 4 * size
    except struct.error as exc:
        raise FormatError(f"truncated KPRW payload: {exc}") from None
    if pos != len(payload):
        raise FormatError("trailing bytes after the last tensor")
    return tensors


def save(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(write_tensors(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        return read_tensors(path.read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
