"""Binary named-tensor files.

Layout, all integers little-endian u32::

    b"CMTM" | version (=1) | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | float32 payload (row-major)

Nothing else is stored, so ``save -> load -> save`` reproduces the bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import BadMagicError, CorruptFileError, TruncatedFileError, UnsupportedVersionError

MAGIC = b"CMTM"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def __eq__(self, other):
        if not isinstance(other, Checkpoint) or self.version != other.version:
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.shape == b.shape and np.asarray(a, np.float32).tobytes() == np.asarray(b, np.float32).tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n > len(self.buf) - self.pos:
            raise TruncatedFileError(f"file ends inside {what} at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise UnsupportedVersionError(f"format version {version} unsupported (expected {VERSION})")
    count = r.u32("tensor count")
    tensors: Dict[str, np.ndarray] = {}
    for i in range(count):
        raw = r.take(r.u32(f"name length of tensor {i}"), f"name of tensor {i}")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptFileError(f"tensor {i} name is not UTF-8") from exc
        if name in tensors:
            raise CorruptFileError(f"duplicate tensor name {name!r}")
        rank = r.u32(f"rank of {name!r}")
        if rank == 0:
            raise CorruptFileError(f"tensor {name!r} has rank 0")
        dims = [r.u32(f"dims of {name!r}") for _ in range(rank)]
        if 0 in dims:
            raise CorruptFileError(f"tensor {name!r} has a zero dimension {dims}")
        n = 1
        for d in dims:
            n *= d
        payload = r.take(4 * n, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(buf):
        raise CorruptFileError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    return Checkpoint(tensors, version)


def save_checkpoint(ckpt, path) -> Path:
    """Write ``ckpt`` (a :class:`Checkpoint` or a name -> array mapping)."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint(dict(ckpt))
    path = Path(path)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
