"""Identity and self-grouping losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, add, cross_entropy, record, scale

MARGIN_MODES = ("arcface", "cosface", "plain")
DEFAULT_MARGINS = {"arcface": 0.5, "cosface": 0.35, "plain": 0.0}
# keeps arccos differentiable
COS_CLAMP = 1.0 - 1e-7


@dataclass
class LossConfig:
    margin_mode: str = "arcface"
    scale: float = 64.0
    margin: float | None = None
    lam: float = 0.1

    def __post_init__(self):
        if self.margin_mode not in MARGIN_MODES:
            raise ValueError(f"margin_mode must be one of {MARGIN_MODES}, got {self.margin_mode!r}")
        if self.margin is None:
            self.margin = DEFAULT_MARGINS[self.margin_mode]
        self.margin = float(self.margin)
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.margin_mode == "arcface" and self.margin >= math.pi / 2:
            raise ValueError("arcface margin must be below pi/2")
        if self.margin_mode == "cosface" and self.margin >= 1:
            raise ValueError("cosface margin must be below 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def _check_labels(labels, n: int, k: int, what: str) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"{what}: expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"{what}: labels must be integers")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"{what}: labels must lie in [0, {k})")
    return labels.astype(np.int64)


def target_margin(cosines: Tensor, labels, mode: str, margin: float) -> Tensor:
    """Replace each row's target cosine by its margin-penalised value.

    arcface: cos(arccos(c) + m) with c clamped to +-COS_CLAMP, continued as
    c - 1 + cos(m) below c = cos(pi - m) so the target logit stays increasing in c;
    cosface: c - m; plain: c.
    """
    n, k = cosines.shape
    labels = _check_labels(labels, n, k, "target_margin")
    rows = np.arange(n)
    c = cosines.data[rows, labels]
    out = cosines.data.copy()
    if mode == "plain" or margin == 0.0:
        return record(out, (cosines,), lambda g: (g,), "target_margin")
    if mode == "cosface":
        out[rows, labels] = c - margin
        return record(out, (cosines,), lambda g: (g,), "target_margin")
    if mode != "arcface":
        raise ValueError(f"unknown margin mode {mode!r}")
    cc = np.clip(c, -COS_CLAMP, COS_CLAMP)
    theta = np.arccos(cc)
    # past theta = pi - m, cos(theta + m) turns upward again and rewards pushing
    # features away from their class; continue linearly from -1 instead
    angular = c > math.cos(math.pi - margin)
    out[rows, labels] = np.where(angular, np.cos(theta + margin), c - 1.0 + math.cos(margin))
    inside = (c > -COS_CLAMP) & (c < COS_CLAMP)
    # d/dc cos(arccos c + m) = sin(theta + m) / sin(theta)
    dangular = np.where(inside, np.sin(theta + margin) / np.where(inside, np.sin(theta), 1.0), 0.0)
    dtarget = np.where(angular, dangular, 1.0)
    branch = np.where(angular, np.where(inside, 1, 0), 2)

    def _backward(g):
        d = g.copy()
        d[rows, labels] = g[rows, labels] * dtarget
        return (d,)

    return record(out, (cosines,), _backward, "target_margin", branch=branch)


def margin_softmax_loss(cosines: Tensor, labels, cfg: LossConfig) -> Tensor:
    n, k = cosines.shape
    labels = _check_labels(labels, n, k, "margin_softmax_loss")
    if np.abs(cosines.data).max(initial=0.0) > 1.0 + 1e-9:
        raise ValueError("margin_softmax_loss: cosines must lie in [-1, 1]")
    logits = scale(target_margin(cosines, labels, cfg.margin_mode, cfg.margin), cfg.scale)
    return cross_entropy(logits, labels)


def self_grouping_loss(gdn_logits: Tensor, labels) -> Tensor:
    """Cross-entropy of the group decision against constant group labels."""
    n, k = gdn_logits.shape
    labels = _check_labels(labels, n, k, "self_grouping_loss")
    return cross_entropy(gdn_logits, labels)


def combined_loss(l1, l2, lam: float):
    """l1 + lam * l2; accepts tensors or plain floats."""
    if isinstance(l1, Tensor) or isinstance(l2, Tensor):
        if lam == 0.0:
            return l1 if isinstance(l1, Tensor) else Tensor(l1)
        return add(l1, scale(l2, lam) if isinstance(l2, Tensor) else lam * l2)
    return float(l1) + lam * float(l2)
