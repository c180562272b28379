"""Versioned checkpoint container: a JSON header plus raw little-endian arrays.

    b"NSLCKPT1" | u64 header length | header JSON | array bytes ...

The header holds ``config``/``meta`` dicts and an ordered tensor table.
Nothing time-dependent is written, so identical parameters give identical
bytes (unlike zip-based ``.npz``).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NSLCKPT1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, arrays: dict, config: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table, blobs, offset = [], [], 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(a)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "config": config, "meta": meta or {},
                         "tensors": table}, sort_keys=True).encode()
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(header)) + header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict, dict, dict]:
    """Return ``(arrays, config, meta)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + n])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
    base = 16 + n
    arrays = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        raw = data[start:start + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        arrays[t["name"]] = np.frombuffer(raw, dtype=t["dtype"]).reshape(t["shape"]).copy()
    return arrays, header["config"], header["meta"]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
