"""Binary checkpoint format.

Layout (little-endian)::

    b"MRCK" | version u32 | config sha256 (32 bytes) | epoch u64
    | state length u32 | state JSON (RNG position, optimizer scalars, config)
    | tensor count u32
    | per tensor: name length u16, name, rank u8, dims u32 * rank, float32 data
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigMismatch, CorruptCheckpoint

MAGIC = b"MRCK"
VERSION = 1


@dataclass
class Checkpoint:
    epoch: int
    config: dict
    tensors: dict[str, np.ndarray]
    state: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> bytes:
        return config_digest(self.config)


def config_digest(trajectory_config: dict) -> bytes:
    blob = json.dumps(trajectory_config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()


def to_bytes(ckpt: Checkpoint) -> bytes:
    state = dict(ckpt.state)
    state["config"] = ckpt.config
    sblob = json.dumps(state, sort_keys=True, separators=(",", ":")).encode()
    parts = [
        struct.pack("<4sI", MAGIC, VERSION),
        ckpt.config_hash,
        struct.pack("<Q", ckpt.epoch),
        struct.pack("<I", len(sblob)),
        sblob,
        struct.pack("<I", len(ckpt.tensors)),
    ]
    for name, arr in ckpt.tensors.items():
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob):
        self.blob, self.pos = blob, 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CorruptCheckpoint(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def from_bytes(blob: bytes, expected_hash: bytes | None = None) -> Checkpoint:
    r = _Reader(blob)
    magic, version = r.unpack("4sI")
    if magic != MAGIC:
        raise CorruptCheckpoint(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    digest = r.take(32)
    (epoch,) = r.unpack("Q")
    (slen,) = r.unpack("I")
    try:
        state = json.loads(r.take(slen))
    except ValueError as e:
        raise CorruptCheckpoint(f"unreadable checkpoint state: {e}") from None
    config = state.pop("config", None)
    if not isinstance(config, dict) or config_digest(config) != digest:
        raise CorruptCheckpoint("stored config does not match its hash")
    if expected_hash is not None and digest != expected_hash:
        raise ConfigMismatch("checkpoint was produced under a different training configuration")
    (count,) = r.unpack("I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("B")
        dims = r.unpack(f"{rank}I") if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    if r.pos != len(blob):
        raise CorruptCheckpoint(f"{len(blob) - r.pos} trailing bytes after tensor table")
    return Checkpoint(epoch=epoch, config=config, tensors=tensors, state=state)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path, expected_hash: bytes | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expected_hash)
