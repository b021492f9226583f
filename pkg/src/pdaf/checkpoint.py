"""Binary named-tensor checkpoint format.

Layout (all integers little-endian u32, values little-endian float64)::

    b"PDAF" | version | meta length | meta JSON (UTF-8)
    | tensor count
    | per tensor: name length | name (UTF-8) | rank | dims x rank | values
    | CRC-32 of every preceding byte

The trailing CRC makes any single corrupted byte a load error.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"PDAF"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


def dumps(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray(MAGIC)
    out += _U32.pack(FORMAT_VERSION)
    out += _U32.pack(len(blob)) + blob
    out += _U32.pack(len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        key = name.encode()
        out += _U32.pack(len(key)) + key
        out += _U32.pack(arr.ndim)
        for d in arr.shape:
            out += _U32.pack(d)
        out += arr.tobytes()
    out += _U32.pack(zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: {what} needs {n} bytes at offset {self.pos}, "
                                  f"file has {len(self.buf)}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def loads(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported by this "
                              f"reader (version {FORMAT_VERSION})")
    blob_at = r.pos
    blob = r.take(r.u32("meta length"), "meta JSON")
    try:
        meta = json.loads(blob.decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"corrupt meta JSON at offset {blob_at}") from None
    tensors: dict[str, np.ndarray] = {}
    count = r.u32("tensor count")
    for _ in range(count):
        at = r.pos
        try:
            name = r.take(r.u32("name length"), "tensor name").decode()
        except UnicodeDecodeError:
            raise CheckpointError(f"corrupt tensor name at offset {at}") from None
        rank = r.u32("rank")
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank} for {name!r} at offset {at}")
        dims = tuple(r.u32("dims") for _ in range(rank))
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        values = np.frombuffer(r.take(8 * n, f"values of {name!r}"), dtype="<f8")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r} at offset {at}")
        tensors[name] = values.astype(np.float64).reshape(dims)
    body_end = r.pos
    stored = r.u32("checksum")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} unexpected trailing bytes at offset {r.pos}")
    if zlib.crc32(buf[:body_end]) != stored:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    return meta, tensors


def save(path: str | os.PathLike, meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    data = dumps(meta, tensors)
    Path(path).write_bytes(data)
    return data


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
