"""Versioned binary checkpoints.

Layout: magic, little-endian uint64 header length, UTF-8 JSON header, raw
array blob. The header lists every array (name, shape, dtype, offset) plus the
config, alphabet, tag set and a sha256 of the blob, so a load can be checked
before any parameter is touched.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PGFORGE\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays_blob(arrays: list[tuple[str, np.ndarray]]):
    entries, chunks, offset = [], [], 0
    for name, arr in arrays:
        a = np.ascontiguousarray(arr)
        raw = a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str.lstrip("<>|="), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def dumps(model, meta: dict | None = None, extra_arrays: list | None = None) -> bytes:
    params = [(name, p.data) for name, p in model.named_parameters()]
    entries, blob = _arrays_blob(params + list(extra_arrays or []))
    n_params = len(params)
    header = {
        "version": VERSION,
        "setup": model.setup,
        "config": model.cfg,
        "alphabet": model.alphabet.symbols,
        "tags": list(model.tagset.tags),
        "params": entries[:n_params],
        "extra": entries[n_params:],
        "meta": meta or {},
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hdr)) + hdr + blob


def save(path, model, meta: dict | None = None, extra_arrays: list | None = None) -> None:
    data = dumps(model, meta, extra_arrays)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def read(path_or_bytes) -> tuple[dict, dict]:
    """Parse and verify a checkpoint. Returns (header, {name: array})."""
    data = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else Path(path_or_bytes).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a pageforge checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start : start + n].decode())
    if header.get("version") != VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')} is not supported (expected {VERSION})")
    blob = data[start + n :]
    if hashlib.sha256(blob).hexdigest() != header["sha256"]:
        raise CheckpointError("checkpoint blob checksum mismatch")
    arrays = {}
    for e in header["params"] + header["extra"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"]).copy()
    return header, arrays


def load_into(model, header: dict, arrays: dict) -> None:
    """Copy arrays into ``model``; names and shapes must match exactly."""
    named = dict(model.named_parameters())
    expected = [e["name"] for e in header["params"]]
    if list(named) != expected:
        missing = sorted(set(named) ^ set(expected))
        raise CheckpointError(f"parameter names differ from the model: {missing[:5]}")
    for name, p in named.items():
        a = arrays[name]
        if a.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {a.shape}, model {p.data.shape}")
    for name, p in named.items():
        p.data = arrays[name].astype(p.data.dtype)


def load(path):
    """Rebuild the model recorded in a checkpoint. Returns (model, header, arrays)."""
    from .model import build_model

    header, arrays = read(path)
    model = build_model(header["config"], header["setup"])
    if model.alphabet.symbols != header["alphabet"] or list(model.tagset.tags) != header["tags"]:
        raise CheckpointError("alphabet or tag set in header disagrees with the config")
    load_into(model, header, arrays)
    return model, header, arrays
