"""Binary checkpoint container.

Layout: ``b"SETC"``, u16 version, u32 header length, a UTF-8 JSON header
(sorted keys), then every array as raw little-endian float64 in header order.
The header records each array's name and shape, so the file is self-describing.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .synth import FormatError

MAGIC = b"SETC"
VERSION = 1
PREFIX = struct.Struct("<4sHI")


def dumps(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    """Serialize JSON-able ``meta`` plus named arrays; key order of ``arrays`` is preserved."""
    manifest = []
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    header = json.dumps({"meta": meta, "arrays": manifest}, sort_keys=True, separators=(",", ":")).encode()
    return PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < PREFIX.size:
        raise FormatError("file too short for a checkpoint header", 0)
    magic, version, hlen = PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    start = PREFIX.size
    if start + hlen > len(blob):
        raise FormatError("truncated checkpoint header", start)
    try:
        header = json.loads(blob[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", start) from exc
    off = start + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if off + n > len(blob):
            raise FormatError(f"truncated array {entry['name']!r}", off)
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=off).astype(np.float64).reshape(shape)
        off += n
    if off != len(blob):
        raise FormatError("trailing bytes after the last array", off)
    return header["meta"], arrays


def save(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(meta, arrays))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
