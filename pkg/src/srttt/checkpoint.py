"""Checkpoint container.

Layout (little-endian)::

    b"SRTTTCK\\0"          8-byte magic
    u32 version
    u64 manifest_len
    manifest               UTF-8 JSON: format version, step, config, config_hash,
                           optimizer step counts, and [{name, shape, offset}]
    records                one tensor record per manifest entry
                           (u32 ndim | u64 dims | f64 payload), offsets relative
                           to the start of this section
    sha256                 32-byte digest of everything above
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .autograd import tensor_from_bytes, tensor_to_bytes

MAGIC = b"SRTTTCK\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, tensors: dict[str, np.ndarray], meta: dict):
    blobs, entries, off = [], [], 0
    for name in sorted(tensors):
        b = tensor_to_bytes(tensors[name])
        entries.append({"name": name, "shape": list(np.shape(tensors[name])), "offset": off})
        blobs.append(b)
        off += len(b)
    manifest = json.dumps({**meta, "format_version": VERSION, "tensors": entries}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(manifest)) + manifest + b"".join(blobs)
    data = body + hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 + 32 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted checkpoint)")
    start = len(MAGIC) + 12
    meta = json.loads(body[start : start + mlen])
    base = start + mlen
    tensors = {}
    for e in meta.pop("tensors"):
        t, _ = tensor_from_bytes(body, base + e["offset"])
        if list(t.shape) != e["shape"]:
            raise CheckpointError(f"{path}: tensor {e['name']} shape mismatch")
        tensors[e["name"]] = t.data
    return tensors, meta
