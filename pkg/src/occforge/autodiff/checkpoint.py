"""Checkpoint files: magic, u32 header length, JSON header, little-endian f32 payload."""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"OCCK"


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(config: dict, tensors: dict, extra: dict | None = None) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": config, "tensors": manifest, "extra": extra or {}}, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def save_checkpoint(path, config: dict, tensors: dict, extra: dict | None = None) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(config, tensors, extra))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict, dict, dict]:
    """Returns (config, {name: float32 array}, extra)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    try:
        header = json.loads(blob[8 : 8 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from None
    payload = memoryview(blob)[8 + hlen :]
    tensors = {}
    for t in header["tensors"]:
        end = t["offset"] + t["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {t['name']!r} runs past end of payload")
        arr = np.frombuffer(payload[t["offset"] : end], dtype="<f4").reshape(t["shape"])
        tensors[t["name"]] = arr.astype(np.float32)
    return header["config"], tensors, header.get("extra", {})
