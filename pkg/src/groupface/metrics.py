"""Similarity scores and recognition metrics.

Thresholds are always swept exactly over the observed scores; nothing is
interpolated.  Conventions:

* TAR@FAR: a pair is accepted when its score is strictly greater than the
  threshold ``t``; ``t`` is the smallest value with
  ``#{impostor > t} / n_impostor <= FAR``, and TAR is ``#{genuine > t} / n_genuine``.
* Pair verification: "same" is predicted when ``score > t``; ``t`` ranges over
  midpoints between consecutive distinct scores plus one value below and one
  above the whole range.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_FAR_LEVELS = (1e-5, 1e-4, 1e-3, 1e-2)


@dataclass
class SimilarityConfig:
    beta: float = 0.1
    gamma: float = 1.0 / 3.0
    distance_metric: str = "euclidean"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.distance_metric != "euclidean":
            raise ValueError("only the euclidean distance on unit-normalised features is supported")


@dataclass
class EvalReport:
    tar_at_far: dict[float, float]
    rank1: float
    pair_accuracy: float
    label_histogram: list[int]
    kl_to_uniform: float
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tar_at_far"] = {repr(float(k)): v for k, v in self.tar_at_far.items()}
        if not d["extras"]:
            del d["extras"]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            tar_at_far={float(k): float(v) for k, v in d["tar_at_far"].items()},
            rank1=float(d["rank1"]),
            pair_accuracy=float(d["pair_accuracy"]),
            label_histogram=[int(c) for c in d["label_histogram"]],
            kl_to_uniform=float(d["kl_to_uniform"]),
            extras=d.get("extras", {}),
        )


def _unit_rows(a: np.ndarray, what: str) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError(f"{what}: zero vector")
    return a / norms


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine_similarity: zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def group_distance(h_i, h_j) -> float:
    """Euclidean distance between unit-normalised intermediate features."""
    u = _unit_rows(h_i, "group_distance")[0]
    v = _unit_rows(h_j, "group_distance")[0]
    return float(np.linalg.norm(u - v))


def group_aware_similarity(vbar_i, vbar_j, vhat_i, vhat_j, cfg: SimilarityConfig | None = None) -> float:
    """cos(vbar_i, vbar_j) - beta * D(vhat_i, vhat_j) ** gamma."""
    cfg = cfg or SimilarityConfig()
    s = cosine_similarity(vbar_i, vbar_j)
    d = group_distance(vhat_i, vhat_j)
    return s - cfg.beta * d**cfg.gamma


def cosine_matrix(a, b) -> np.ndarray:
    return np.clip(_unit_rows(a, "cosine_matrix") @ _unit_rows(b, "cosine_matrix").T, -1.0, 1.0)


def group_distance_matrix(a, b, block_elems: int = 1 << 22) -> np.ndarray:
    # explicit differences, not the Gram expansion: |u|^2 + |v|^2 - 2uv leaves ~1e-8
    # for identical rows, which the gamma power inflates into a visible penalty
    ua, ub = _unit_rows(a, "group_distance"), _unit_rows(b, "group_distance")
    out = np.empty((len(ua), len(ub)))
    rows = max(1, block_elems // max(1, ub.size))
    for start in range(0, len(ua), rows):
        diff = ua[start : start + rows, None, :] - ub[None, :, :]
        out[start : start + rows] = np.sqrt((diff * diff).sum(axis=2))
    return out


@dataclass
class Embeddings:
    """Final representations and, optionally, group-decision intermediates."""

    vbar: np.ndarray
    vhat: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.vbar)

    def take(self, idx) -> "Embeddings":
        return Embeddings(self.vbar[idx], None if self.vhat is None else self.vhat[idx])


def make_similarity(use_group_similarity: bool, cfg: SimilarityConfig | None = None) -> Callable:
    """Matrix similarity ``f(Embeddings, Embeddings) -> [n_a x n_b]``."""
    cfg = cfg or SimilarityConfig()

    def plain(a: Embeddings, b: Embeddings) -> np.ndarray:
        return cosine_matrix(a.vbar, b.vbar)

    def grouped(a: Embeddings, b: Embeddings) -> np.ndarray:
        if a.vhat is None or b.vhat is None:
            raise ValueError("group-aware similarity needs intermediate features")
        s = cosine_matrix(a.vbar, b.vbar)
        if cfg.beta == 0:
            return s
        return s - cfg.beta * group_distance_matrix(a.vhat, b.vhat) ** cfg.gamma

    return grouped if use_group_similarity else plain


def _scores(x, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{what} scores are empty")
    return arr


def far_threshold(impostor, far: float) -> float:
    """Smallest t with #{impostor > t} / n <= far (``-inf`` when far >= 1)."""
    imp = np.sort(_scores(impostor, "impostor"))
    if far >= 1:
        return -math.inf
    n = imp.size
    cand = np.unique(imp)
    above = n - np.searchsorted(imp, cand, side="right")
    ok = above / n <= far
    # above / n is non-increasing in t, so the first passing candidate is the smallest
    return float(cand[np.argmax(ok)])


def tar_at_far(genuine, impostor, far_levels: Sequence[float] = DEFAULT_FAR_LEVELS) -> dict[float, float]:
    gen = np.sort(_scores(genuine, "genuine"))
    _scores(impostor, "impostor")
    out = {}
    for far in far_levels:
        if not 0 < far <= 1:
            raise ValueError(f"FAR level {far} outside (0, 1]")
        t = far_threshold(impostor, far)
        out[float(far)] = float((gen.size - np.searchsorted(gen, t, side="right")) / gen.size)
    return out


def roc_points(genuine, impostor) -> np.ndarray:
    """(threshold, far, tar) for every distinct score, accepting score > threshold."""
    gen = np.sort(_scores(genuine, "genuine"))
    imp = np.sort(_scores(impostor, "impostor"))
    t = np.unique(np.concatenate([gen, imp, [-np.inf]]))
    far = (imp.size - np.searchsorted(imp, t, side="right")) / imp.size
    tar = (gen.size - np.searchsorted(gen, t, side="right")) / gen.size
    return np.stack([t, far, tar], axis=1)


def write_roc_csv(path, genuine, impostor) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "tar"])
        for t, f, r in roc_points(genuine, impostor):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(r))])


def pair_verification_accuracy(pairs) -> float:
    """Best accuracy over thresholds for ``(score, same_identity)`` pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs")
    scores = np.array([float(s) for s, _ in pairs])
    same = np.array([bool(y) for _, y in pairs])
    return pair_accuracy_arrays(scores, same)


def pair_accuracy_arrays(scores, same) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if same.all() or not same.any():
        raise ValueError("pair verification needs both same and different pairs")
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], same[order]
    n = s.size
    n_pos = int(y.sum())
    # threshold just below distinct value j: accept all of s[j:]
    _, first = np.unique(s, return_index=True)
    pos_below = np.concatenate([[0], np.cumsum(y)])[first]
    neg_below = first - pos_below
    correct_at = (n_pos - pos_below) + neg_below
    best = max(int(correct_at.max()), n - n_pos)  # threshold above everything
    return best / n


def rank1_identification(
    probe_embeddings,
    probe_ids,
    gallery_embeddings,
    gallery_ids,
    similarity_fn: Callable | None = None,
) -> float:
    """Fraction of probes whose best-scoring gallery entry has their identity.

    Embeddings may be plain arrays (cosine scoring by default) or any objects
    understood by ``similarity_fn(probes, gallery) -> [n_probe x n_gallery]``.
    Ties go to the lower gallery index.
    """
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    missing = np.setdiff1d(probe_ids, gallery_ids)
    if missing.size:
        raise ValueError(f"probe identities missing from gallery: {missing[:5].tolist()}")
    if similarity_fn is None:
        similarity_fn = cosine_matrix
    sims = np.asarray(similarity_fn(probe_embeddings, gallery_embeddings))
    best = np.argmax(sims, axis=1)
    return float((gallery_ids[best] == probe_ids).mean())


def label_distribution_stats(labels, num_groups: int) -> tuple[np.ndarray, float]:
    """Histogram of labels and KL(empirical || uniform) in nats."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_groups):
        raise ValueError(f"labels must lie in [0, {num_groups})")
    hist = np.bincount(labels, minlength=num_groups)
    return hist, kl_to_uniform(hist)


def kl_to_uniform(hist) -> float:
    hist = np.asarray(hist, dtype=np.float64)
    total = hist.sum()
    if total == 0:
        return 0.0
    q = hist / total
    nz = q > 0
    return float((q[nz] * np.log(q[nz] * hist.size)).sum())
