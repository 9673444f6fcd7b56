"""Self-describing checkpoint container.

Layout (all integers little-endian):

    bytes 0..7    magic  b"CAPSCKPT"
    bytes 8..11   format version (uint32, currently 1)
    bytes 12..15  header length L (uint32)
    bytes 16..16+L-1   UTF-8 JSON header:
        {"version": 1,
         "config": {...model config...},
         "meta": {...free-form training metadata...},
         "blobs": [{"name": str, "shape": [int, ...]}, ...]}
    then one float64 little-endian buffer per blob, in header order.

Parameter and optimizer arrays are stored as 64-bit floats regardless of
the in-memory training dtype, so checkpoints are exact and portable.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CAPSCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(path, config, blobs, meta=None):
    """Write named arrays plus a config record.

    config: JSON-serializable dict; blobs: mapping name -> ndarray;
    meta: optional JSON-serializable dict (epoch, lr, metrics, ...).
    """
    names = list(blobs)
    header = {
        "version": FORMAT_VERSION,
        "config": config,
        "meta": meta or {},
        "blobs": [{"name": n, "shape": list(np.asarray(blobs[n]).shape)} for n in names],
    }
    payload = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for n in names:
            fh.write(np.ascontiguousarray(blobs[n], dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Read a checkpoint back: (config dict, {name: float64 array}, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        blobs = {}
        for entry in header["blobs"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"truncated blob {entry['name']!r}")
            blobs[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return header["config"], blobs, header.get("meta", {})


def save_model(path, model, meta=None, extra_blobs=None):
    from .models import config_to_dict

    blobs = {name: p.data for name, p in model.named_params()}
    if extra_blobs:
        blobs.update(extra_blobs)
    return save_checkpoint(path, config_to_dict(model.cfg), blobs, meta=meta)


def load_model(path, dtype=None):
    """Rebuild a CapsuleModel from a checkpoint. Returns (model, meta)."""
    from .models import build_model, config_from_dict

    config, blobs, meta = load_checkpoint(path)
    cfg = config_from_dict(config)
    model = build_model(cfg, seed=0, dtype=dtype or np.float64)
    for name, p in model.named_params():
        if name not in blobs:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        arr = blobs[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {arr.shape} vs model {p.shape}"
            )
        p.data = arr.astype(model.dtype, copy=True)
    return model, meta
