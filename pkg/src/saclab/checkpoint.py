"""Binary checkpoint container.

Layout, little-endian::

    b"SACL"  u16 version  u32 entry_count
    per entry: u32 name_len, name (UTF-8), u32 rank, rank * u32 dims,
               float32 payload (C order)
    u32 manifest_len, manifest (UTF-8 JSON, sorted keys)

The manifest holds everything that is not a float32 tensor (rng states,
normaliser statistics, counters, the run configuration and its hash).
"""

from __future__ import annotations

import json
import os
import struct
from typing import Dict, Tuple

import numpy as np

from .errors import FormatError

MAGIC = b"SACL"
VERSION = 1


def encode(entries: Dict[str, np.ndarray], manifest: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise TypeError(f"checkpoint entry {name!r} must be float32, got {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = json.dumps(manifest or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not UTF-8") from None
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * size)
        if name in entries:
            raise FormatError(f"duplicate entry {name!r}")
        entries[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    (mlen,) = r.unpack("<I")
    try:
        manifest = json.loads(r.take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("checkpoint manifest is corrupt") from None
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint manifest")
    return entries, manifest


def save(path, entries: Dict[str, np.ndarray], manifest: dict | None = None) -> None:
    data = encode(entries, manifest)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return decode(fh.read())
