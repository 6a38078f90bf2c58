"""Binary checkpoint format for model parameters.

Layout (all integers little-endian):

    magic  b"ELCK"
    u32    format version (currently 1)
    u64    training step
    u32    config JSON byte length, then that many UTF-8 bytes
    u32    tensor count
    per tensor:
        u32   name byte length, then UTF-8 name
        u32   ndim, then ndim u64 dims
        f32   values, C order, little-endian

Tensors are stored as f32 and loaded back as f64 working copies, so a
save/load/save cycle is bit-exact while training math stays in f64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"ELCK"
VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    step: int
    config: dict
    tensors: dict[str, np.ndarray]


def save_checkpoint(path: str, step: int, config: dict,
                    tensors: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<Q", step)
    cfg_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg_bytes))
    blob += cfg_bytes
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        name_b = name.encode("utf-8")
        blob += struct.pack("<I", len(name_b))
        blob += name_b
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        blob += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<Q", dim)
        blob += arr.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.off}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"bad magic in {path!r}: not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    step = r.u64()
    config = json.loads(r.take(r.u32()).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(4 * count)
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float64)
    if r.off != len(data):
        raise CheckpointError(f"{len(data) - r.off} trailing bytes in {path!r}")
    return Checkpoint(step=step, config=config, tensors=tensors)
