"""Parameter checkpoint files.

Layout: 64-byte header (magic, schema version, manifest length), a UTF-8 JSON
manifest listing every tensor's name and shape in payload order plus free-form
metadata, then the tensors as little-endian 64-bit floats.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"GECNNCKP"
CKPT_VERSION = 1
_HEADER = struct.Struct("<8sHHIQ")
_HEADER_SIZE = 64


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    names = list(tensors)
    arrays = [np.asarray(tensors[n], dtype="<f8", order="C") for n in names]
    manifest = json.dumps({
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "meta": meta or {},
    }).encode("utf-8")
    payload_len = sum(a.nbytes for a in arrays)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, 0, len(manifest), payload_len).ljust(_HEADER_SIZE, b"\0"))
        fh.write(manifest)
        for a in arrays:
            fh.write(a.tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_SIZE:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, _, manifest_len, payload_len = _HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint schema version {version}, expected {CKPT_VERSION}")
    body = raw[_HEADER_SIZE:]
    if len(body) != manifest_len + payload_len:
        raise CheckpointError(f"{path}: checkpoint is truncated or has trailing bytes")
    try:
        manifest = json.loads(body[:manifest_len].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: malformed manifest: {exc}") from exc
    out = {}
    offset = manifest_len
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        if offset + 8 * count > len(body):
            raise CheckpointError(f"{path}: payload too short for {entry['name']}")
        out[entry["name"]] = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(body):
        raise CheckpointError(f"{path}: payload length disagrees with manifest")
    return out, manifest.get("meta", {})
