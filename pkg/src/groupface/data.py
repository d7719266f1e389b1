"""Synthetic identities with planted latent groups, and on-disk formats.

Binary matrix file layout (little-endian)::

    bytes 0..11   magic  b"GROUPFACEMAT"
    bytes 12..15  uint32 version (1: float32 payload, 2: float64 payload)
    uint64        record count
    uint32        feature dimension
    payload       row-major floats

Label files are bare uint32 arrays, one per record.  A ``dataset.json``
sidecar names every file and its role.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

MAGIC = b"GROUPFACEMAT"
VERSION_F32 = 1
VERSION_F64 = 2
_HEADER = struct.Struct("<12sIQI")
SIDECAR = "dataset.json"


@dataclass
class SyntheticDataConfig:
    num_identities: int = 250
    num_eval_identities: int = 50
    samples_per_identity: int = 20
    input_dim: int = 32
    num_latent_groups: int = 8
    within_identity_noise: float = 0.12
    within_group_spread: float = 0.25
    seed: int = 0

    def __post_init__(self):
        counts = [self.num_identities, self.samples_per_identity, self.input_dim, self.num_latent_groups]
        if any(int(c) <= 0 for c in counts):
            raise ValueError("all counts must be positive")
        if self.num_identities < 2 * self.num_latent_groups:
            raise ValueError("need at least two identities per latent group")
        if not 0 <= self.num_eval_identities < self.num_identities:
            raise ValueError("num_eval_identities must leave some identities for training")
        if self.within_identity_noise <= 0 or self.within_group_spread <= 0:
            raise ValueError("noise levels must be positive")


@dataclass
class Dataset:
    features: np.ndarray          # [N x D] float64
    identity_labels: np.ndarray   # [N] int64
    group_labels: np.ndarray      # [N] int64, planted; never shown to the model
    split: np.ndarray             # [N] int64, 0 = train, 1 = eval

    def __len__(self) -> int:
        return len(self.features)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, mask) -> "Dataset":
        return Dataset(
            self.features[mask], self.identity_labels[mask], self.group_labels[mask], self.split[mask]
        )

    def train(self) -> "Dataset":
        return self.subset(self.split == 0)

    def eval(self) -> "Dataset":
        return self.subset(self.split == 1)

    @property
    def num_identities(self) -> int:
        return int(np.unique(self.identity_labels).size)


def check_disjoint(data: Dataset) -> None:
    train_ids = set(np.unique(data.identity_labels[data.split == 0]).tolist())
    eval_ids = set(np.unique(data.identity_labels[data.split == 1]).tolist())
    both = train_ids & eval_ids
    if both:
        raise ValueError(f"identities in both splits: {sorted(both)[:5]}")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def generate_synthetic_dataset(cfg: SyntheticDataConfig) -> Dataset:
    """Gaussian identities around group centres on the unit sphere.

    Identity labels are renumbered so training identities are
    ``0..n_train-1`` (the classifier rows) and evaluation identities follow.
    """
    rng = np.random.default_rng(cfg.seed)
    d, n_id, g = cfg.input_dim, cfg.num_identities, cfg.num_latent_groups
    centres = _unit(rng.standard_normal((g, d)))
    id_group = rng.permutation(np.arange(n_id) % g)
    id_centres = _unit(centres[id_group] + cfg.within_group_spread * rng.standard_normal((n_id, d)))

    eval_ids = np.sort(rng.choice(n_id, size=cfg.num_eval_identities, replace=False))
    is_eval = np.zeros(n_id, dtype=bool)
    is_eval[eval_ids] = True
    order = np.concatenate([np.flatnonzero(~is_eval), np.flatnonzero(is_eval)])
    new_label = np.empty(n_id, dtype=np.int64)
    new_label[order] = np.arange(n_id)

    s = cfg.samples_per_identity
    raw_id = np.repeat(np.arange(n_id), s)
    noise = cfg.within_identity_noise * rng.standard_normal((n_id * s, d))
    feats = id_centres[raw_id] + noise
    return Dataset(
        features=feats,
        identity_labels=new_label[raw_id],
        group_labels=id_group[raw_id].astype(np.int64),
        split=is_eval[raw_id].astype(np.int64),
    )


def write_matrix(path, arr: np.ndarray, dtype=np.float32) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.ndim != 2:
        raise ValueError("matrix files hold 2-D arrays")
    version = VERSION_F32 if np.dtype(dtype) == np.float32 else VERSION_F64
    payload = arr.astype("<f4" if version == VERSION_F32 else "<f8")
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, version, arr.shape[0], arr.shape[1]))
            fh.write(payload.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, count, dim = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version not in (VERSION_F32, VERSION_F64):
            raise ValueError(f"{path}: unsupported version {version}")
        dt = "<f4" if version == VERSION_F32 else "<f8"
        body = fh.read()
    expected = count * dim * np.dtype(dt).itemsize
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dt).reshape(count, dim).astype(np.float64)


def write_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.size and labels.min() < 0:
        raise ValueError("labels must be non-negative")
    try:
        Path(path).write_bytes(labels.astype("<u4").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_labels(path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<u4").astype(np.int64)


def save_dataset(data: Dataset, out_dir, meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "features": "features.bin",
        "identity_labels": "identity_labels.bin",
        "group_labels": "group_labels.bin",
        "split": "split.bin",
    }
    write_matrix(out / files["features"], data.features)
    write_labels(out / files["identity_labels"], data.identity_labels)
    write_labels(out / files["group_labels"], data.group_labels)
    write_labels(out / files["split"], data.split)
    sidecar = {
        "format": "groupface-dataset",
        "version": VERSION_F32,
        "records": len(data),
        "feature_dim": data.input_dim,
        "files": files,
        "roles": {
            "features": "input vectors, float32 matrix",
            "identity_labels": "uint32 identity per record; training identities first",
            "group_labels": "uint32 planted latent group per record (analysis only)",
            "split": "uint32 per record, 0 = train, 1 = eval",
        },
    }
    if meta:
        sidecar["generator"] = meta
    (out / SIDECAR).write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return out


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    side = json.loads((root / SIDECAR).read_text(encoding="utf-8"))
    files = side["files"]
    feats = read_matrix(root / files["features"])
    ds = Dataset(
        features=feats,
        identity_labels=read_labels(root / files["identity_labels"]),
        group_labels=read_labels(root / files["group_labels"]),
        split=read_labels(root / files["split"]),
    )
    for name in ("identity_labels", "group_labels", "split"):
        if len(getattr(ds, name)) != len(feats):
            raise ValueError(f"{root}: {name} has {len(getattr(ds, name))} entries for {len(feats)} records")
    return ds


def _coerce(value: str, target):
    if isinstance(target, bool):
        low = value.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {value!r}")
        return low in ("true", "1", "yes")
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float) or target is None:
        return float(value)
    if isinstance(target, (list, tuple)):
        items = [v.strip() for v in value.split(",") if v.strip()]
        return [_coerce(v, target[0]) if target else _guess(v) for v in items]
    return value.strip()


def _guess(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def read_key_values(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment; duplicate keys rejected."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ValueError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


def apply_key_values(defaults, values: dict[str, str], aliases: dict[str, str] | None = None):
    """Return a copy of dataclass ``defaults`` with ``values`` applied.

    Keys not naming a field (after ``aliases``) raise ``KeyError``.
    """
    aliases = aliases or {}
    known = {f.name for f in fields(defaults)}
    kwargs = {f.name: getattr(defaults, f.name) for f in fields(defaults)}
    for key, raw in values.items():
        name = aliases.get(key, key)
        if name not in known:
            raise KeyError(f"unknown config key {key!r}")
        kwargs[name] = _coerce(raw, kwargs[name])
    return type(defaults)(**kwargs)


def build_dataclass(cls, values: dict[str, str], aliases: dict[str, str] | None = None):
    """Construct ``cls`` from only the given keys so derived defaults resolve afresh."""
    aliases = aliases or {}
    template = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        name = aliases.get(key, key)
        if name not in known:
            raise KeyError(f"unknown config key {key!r}")
        kwargs[name] = _coerce(raw, getattr(template, name))
    return cls(**kwargs)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
