"""Self-distributed group labels.

A :class:`GroupState` keeps the per-batch mean of the group probabilities
for the last ``window`` batches.  Their average estimates the population
expectation of ``p(G_k|x)``, which is subtracted before taking the argmax so
that labels spread evenly over the groups.

All argmax calls here break ties toward the lowest index (``np.argmax``
semantics).
"""

from __future__ import annotations

from collections import deque
from typing import Sequence

import numpy as np

DEFAULT_WINDOW = 64


def _as_probs(p, k: int | None = None) -> np.ndarray:
    arr = np.asarray(getattr(p, "data", p), dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected an N x K probability matrix, got shape {arr.shape}")
    if k is not None and arr.shape[1] != k:
        raise ValueError(f"probabilities have {arr.shape[1]} groups, expected {k}")
    return arr


class GroupState:
    """Ring buffer of recent per-batch mean group probabilities."""

    def __init__(self, num_groups: int, window: int = DEFAULT_WINDOW):
        if num_groups < 2:
            raise ValueError("need at least two groups")
        if window < 1:
            raise ValueError("window must hold at least one batch")
        self.num_groups = num_groups
        self.window = window
        self.buffer: deque[np.ndarray] = deque(maxlen=window)
        self.batches_seen = 0

    def __len__(self) -> int:
        return len(self.buffer)

    def __repr__(self) -> str:
        return (
            f"GroupState(K={self.num_groups}, window={self.window}, "
            f"stored={len(self.buffer)}, seen={self.batches_seen})"
        )

    def push_mean(self, batch_mean: np.ndarray) -> None:
        m = np.asarray(batch_mean, dtype=np.float64).copy()
        if m.shape != (self.num_groups,):
            raise ValueError(f"batch mean has shape {m.shape}, expected ({self.num_groups},)")
        if (m < -1e-12).any() or (m > 1 + 1e-12).any() or abs(m.sum() - 1.0) > 1e-9:
            raise ValueError("batch mean must be a probability vector")
        self.buffer.append(m)
        self.batches_seen += 1

    def update(self, batch_probs) -> None:
        p = _as_probs(batch_probs, self.num_groups)
        self.push_mean(p.mean(axis=0))

    def expectation(self) -> np.ndarray:
        if not self.buffer:
            raise ValueError("no batches recorded yet")
        return np.mean(np.stack(self.buffer), axis=0)

    def expectation_or_uniform(self) -> np.ndarray:
        """Expectation, or 1/K everywhere before any batch is recorded."""
        if not self.buffer:
            return np.full(self.num_groups, 1.0 / self.num_groups)
        return self.expectation()

    def copy(self) -> "GroupState":
        other = GroupState(self.num_groups, self.window)
        other.buffer.extend(m.copy() for m in self.buffer)
        other.batches_seen = self.batches_seen
        return other

    def to_dict(self) -> dict:
        return {
            "num_groups": self.num_groups,
            "window": self.window,
            "batches_seen": self.batches_seen,
            "buffer": [m.tolist() for m in self.buffer],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupState":
        state = cls(int(d["num_groups"]), int(d["window"]))
        state.buffer.extend(np.asarray(m, dtype=np.float64) for m in d["buffer"])
        state.batches_seen = int(d["batches_seen"])
        return state


def update_expectation(state: GroupState, batch_probs) -> None:
    state.update(batch_probs)


def current_expectation(state: GroupState) -> np.ndarray:
    return state.expectation()


def merge(states: Sequence[GroupState]) -> GroupState:
    """Combine per-worker states recorded in lockstep.

    Entry ``t`` of the merged buffer is the average of every worker's entry
    ``t``, which equals the mean over the pooled batch when workers see
    equal-sized shards.
    """
    if not states:
        raise ValueError("nothing to merge")
    first = states[0]
    for s in states[1:]:
        if s.num_groups != first.num_groups or s.window != first.window:
            raise ValueError(
                f"cannot merge K={s.num_groups}, B={s.window} into K={first.num_groups}, B={first.window}"
            )
        if len(s.buffer) != len(first.buffer):
            raise ValueError("workers hold different numbers of batches")
    merged = GroupState(first.num_groups, first.window)
    for entries in zip(*(s.buffer for s in states)):
        merged.buffer.append(np.mean(np.stack(entries), axis=0))
    merged.batches_seen = max(s.batches_seen for s in states)
    return merged


def expectation_normalized_probability(p, e) -> np.ndarray:
    """(p - e) / K + 1/K, row by row."""
    e = np.asarray(e, dtype=np.float64)
    p = _as_probs(p)
    k = p.shape[1]
    if e.shape != (k,):
        raise ValueError(f"expectation has shape {e.shape}, probabilities have {k} groups")
    return (p - e) / k + 1.0 / k


def assign_labels_naive(p) -> np.ndarray:
    return np.argmax(_as_probs(p), axis=1)


def assign_labels_self_distributed(p, state: GroupState) -> np.ndarray:
    p = _as_probs(p, state.num_groups)
    return np.argmax(expectation_normalized_probability(p, state.expectation()), axis=1)
