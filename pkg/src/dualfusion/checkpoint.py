"""Binary checkpoint archive: named float tensors plus a config echo.

Layout, all integers little-endian:

    magic   6 bytes  "DCLDM1"
    version u16      currently 1
    iter    u64      training iteration counter
    conf    u64 length + UTF-8 key=value text
    count   u64      number of tensors
    per tensor: u64 name length, UTF-8 name, u64 rank, u64 extents...,
                payload as little-endian 32-bit floats

Payloads are single precision. Saving first snaps the in-memory arrays onto
the float32 grid (in place), so the state that keeps running is bitwise the
state a reader gets back; load(save(state)) round trips exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DCLDM1"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint data."""


@dataclass
class Checkpoint:
    config_text: str
    iteration: int
    tensors: dict = field(default_factory=dict)

    def add(self, name, array):
        if name in self.tensors:
            raise CheckpointError(f"name collision: {name!r}")
        self.tensors[name] = array


def snap_f32(array):
    """Project a float64 array onto the float32 grid, in place."""
    array[...] = array.astype("<f4").astype(np.float64)
    return array


def save_checkpoint(path, ckpt):
    """Serialize; snaps every tensor to float32 in place first."""
    blob = ckpt.config_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<Q", ckpt.iteration))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(ckpt.tensors)))
        for name, arr in ckpt.tensors.items():
            snap_f32(arr)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(arr.astype("<f4").tobytes())


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(6) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = r.u16()
    if version != VERSION:
        raise CheckpointError(f"{path}: version mismatch, file {version} vs supported {VERSION}")
    iteration = r.u64()
    config_text = r.take(r.u64()).decode("utf-8")
    count = r.u64()
    ckpt = Checkpoint(config_text=config_text, iteration=iteration)
    for _ in range(count):
        name = r.take(r.u64()).decode("utf-8")
        rank = r.u64()
        shape = tuple(r.u64() for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = r.take(4 * n)
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)
        ckpt.add(name, arr)
    return ckpt
