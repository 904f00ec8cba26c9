"""Versioned little-endian checkpoint format.

Byte layout (all integers unsigned little-endian)::

    8 bytes   magic  b"DEARCKPT"
    u32       format version (currently 1)
    u32       metadata length M
    M bytes   UTF-8 JSON metadata object
    u32       tensor count T
    T times:
        u16       name length K
        K bytes   UTF-8 tensor name
        u8        rank R
        R x u32   shape
        prod(shape) x float32   data, C order

Optimizer state is stored as ordinary tensors (names ``adam/<group>/m/<param>``
and ``adam/<group>/v/<param>``); step counts and hyperparameters live in the
metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DEARCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for corrupt, truncated or incompatible checkpoint files."""


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        key = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<B", a.ndim)
        out += struct.pack(f"<{a.ndim}I", *a.shape)
        out += a.tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (m,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(m).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (k,) = r.unpack("<H")
        name = r.take(k).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors, meta
