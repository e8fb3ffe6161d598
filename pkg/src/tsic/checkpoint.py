"""Self-describing checkpoint container with deterministic bytes.

Layout: magic "TSCK" | version u8 | meta_len u32 | meta JSON (sorted keys)
| concatenated C-order array bytes. The JSON manifest records each array's
name, dtype, shape and byte offset. Identical inputs serialize to identical
bytes (no timestamps), which the training determinism contract relies on.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

__all__ = ["save_arrays", "load_arrays", "CheckpointError"]

_MAGIC = b"TSCK"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict, meta: dict | None = None) -> Path:
    """Atomically write named float arrays plus a JSON metadata blob."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format_version": _VERSION, "arrays": entries, "meta": meta or {}}
    meta_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    payload = _MAGIC + struct.pack("<BI", _VERSION, len(meta_bytes)) + meta_bytes + b"".join(blobs)

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    return path


def load_arrays(path):
    """Return (arrays dict, meta dict)."""
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    version, meta_len = struct.unpack("<BI", blob[4:9])
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(blob[9 : 9 + meta_len].decode())
    base = 9 + meta_len
    arrays = {}
    for entry in manifest["arrays"]:
        start = base + entry["offset"]
        raw = blob[start : start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"checkpoint truncated at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return arrays, manifest.get("meta", {})
