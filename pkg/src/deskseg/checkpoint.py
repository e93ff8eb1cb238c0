"""Flat binary checkpoint container.

Layout (all integers little-endian unsigned 32-bit)::

    magic  b"DSCK"
    version
    metadata length, metadata (UTF-8 JSON)
    entry count
    per entry: name length, name (UTF-8), ndim, dims..., payload (<f8, C order)

Entries are written in sorted name order, so equal parameter stores produce
byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        key = name.encode()
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    version, meta_len = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    metadata = json.loads(blob[pos : pos + meta_len].decode())
    pos += meta_len
    (count,) = take("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = take("<I")
        name = blob[pos : pos + klen].decode()
        pos += klen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        end = pos + 8 * n
        if end > len(blob):
            raise CheckpointError(f"truncated payload for {name}")
        arrays[name] = np.frombuffer(blob[pos:end], dtype="<f8").reshape(shape).astype(np.float64)
        pos = end
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return arrays, metadata


def save(path: str | Path, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, metadata))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
