"""Single-file model checkpoints.

Layout (little-endian)::

    12 bytes  magic b"GROUPFACECKP"
    uint32    format version
    uint64    length L of the JSON header
    L bytes   UTF-8 JSON: model config, tensor manifest, group state, extras
    payload   float64 tensors back to back: parameters in declaration order,
              then batch-norm running mean/var per layer, then optimizer
              velocities (if saved) in parameter order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .grouping import GroupState
from .model import GroupFaceModel, ModelConfig

MAGIC = b"GROUPFACECKP"
VERSION = 1
_HEAD = struct.Struct("<12sIQ")


def save_checkpoint(path, model: GroupFaceModel, optimizer=None, extras: dict | None = None) -> Path:
    manifest = []
    blobs = []
    for name, p in model.params.items():
        manifest.append({"kind": "param", "name": name, "shape": list(p.shape)})
        blobs.append(p.data)
    for name, s in model.bn.items():
        manifest.append({"kind": "bn_mean", "name": name, "shape": list(s.running_mean.shape)})
        blobs.append(s.running_mean)
        manifest.append({"kind": "bn_var", "name": name, "shape": list(s.running_var.shape)})
        blobs.append(s.running_var)
    if optimizer is not None:
        for name in model.params:
            v = optimizer.velocity.get(name)
            if v is not None:
                manifest.append({"kind": "velocity", "name": name, "shape": list(v.shape)})
                blobs.append(v)
    header = {
        "config": model.config.to_dict(),
        "tensors": manifest,
        "group_state": model.group_state.to_dict() if model.group_state is not None else None,
        "extras": extras or {},
    }
    head_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(_HEAD.pack(MAGIC, VERSION, len(head_bytes)))
            fh.write(head_bytes)
            for b in blobs:
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path):
    """Return ``(model, velocities, extras)``; velocities maps parameter name to array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, hlen = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[_HEAD.size : _HEAD.size + hlen].decode("utf-8"))
    model = GroupFaceModel(ModelConfig(**header["config"]))
    offset = _HEAD.size + hlen
    velocities: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
        kind, name = entry["kind"], entry["name"]
        if kind == "param":
            if model.params[name].shape != shape:
                raise ValueError(f"{path}: {name} has shape {shape}, config implies {model.params[name].shape}")
            model.params[name].data[...] = arr
        elif kind == "bn_mean":
            model.bn[name].running_mean = arr
        elif kind == "bn_var":
            model.bn[name].running_var = arr
        elif kind == "velocity":
            velocities[name] = arr
        else:
            raise ValueError(f"{path}: unknown tensor kind {kind!r}")
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    if header.get("group_state") is not None:
        model.group_state = GroupState.from_dict(header["group_state"])
    return model, velocities, header.get("extras", {})
