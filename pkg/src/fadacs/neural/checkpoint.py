"""Versioned binary checkpoints for parameter trees.

Layout (little-endian)::

    b"FDCK" | u32 version | u32 manifest_len | manifest JSON | float64 payload

The manifest lists ``{"name", "shape"}`` entries in payload order plus the
layer descriptions of each stack. A JSON sidecar ``<path>.json`` carries
free-form metadata (seed, config hash). Writes go to a temp file first and are
renamed into place.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..errors import BadFileFormat

MAGIC = b"FDCK"
VERSION = 1


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def save_checkpoint(path, trees, layers=None, metadata=None):
    """Write ``trees`` (``{model_name: {param_name: array}}``) to ``path``."""
    entries, chunks = [], []
    for model in sorted(trees):
        for name in sorted(trees[model]):
            arr = np.ascontiguousarray(trees[model][name], dtype="<f8")
            entries.append({"name": f"{model}/{name}", "shape": list(arr.shape)})
            chunks.append(arr.tobytes())
    manifest = json.dumps({"params": entries, "layers": layers or {}}, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<II", VERSION, len(manifest)) + manifest + b"".join(chunks)
    _atomic_write(path, blob)
    if metadata is not None:
        _atomic_write(str(path) + ".json", dumps_json(metadata).encode())


def load_checkpoint(path):
    """Return ``(trees, layers, metadata)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadFileFormat(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise BadFileFormat(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(raw[12:12 + mlen])
    offset = 12 + mlen
    trees: dict[str, dict[str, np.ndarray]] = {}
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(entry["shape"])
        offset += 8 * n
        model, name = entry["name"].split("/", 1)
        trees.setdefault(model, {})[name] = arr.astype(float)
    if offset != len(raw):
        raise BadFileFormat(f"{path}: trailing bytes after payload")
    meta_path = Path(str(path) + ".json")
    metadata = json.loads(meta_path.read_text()) if meta_path.exists() else None
    return trees, manifest["layers"], metadata
