"""Manifest + raw little-endian float64 blob checkpoints.

``<stem>.json`` holds the manifest; ``<stem>.bin`` holds every parameter
array back to back, located by the manifest's ``tensors`` table.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(stem, params: dict, meta: dict) -> str:
    """Write the checkpoint pair and return its fingerprint."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    chunks = []
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=_DTYPE, order="C")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"parameter {name!r} is not finite")
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float64-le",
        "blob": stem.name + ".bin",
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": tensors,
        "meta": meta,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    stem.with_suffix(".bin").write_bytes(blob)
    stem.with_suffix(".json").write_text(text, encoding="utf-8")
    return fingerprint(stem)


def load_checkpoint(stem):
    """Return ``(meta, params)``; parameters come back bit-exact."""
    stem = Path(stem)
    mpath = stem.with_suffix(".json")
    if not mpath.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    blob = (mpath.parent / manifest["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"blob checksum mismatch for {stem}")
    params = {}
    for t in manifest["tensors"]:
        raw = blob[t["offset"]:t["offset"] + t["nbytes"]]
        params[t["name"]] = np.frombuffer(raw, dtype=_DTYPE).reshape(t["shape"]).astype(np.float64)
    return manifest["meta"], params


def fingerprint(stem) -> str:
    stem = Path(stem)
    h = hashlib.sha256()
    h.update(stem.with_suffix(".json").read_bytes())
    h.update(stem.with_suffix(".bin").read_bytes())
    return h.hexdigest()[:16]
