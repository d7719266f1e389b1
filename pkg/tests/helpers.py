"""Shared builders for the test modules."""

import time
from functools import lru_cache

from groupface.data import SyntheticDataConfig, generate_synthetic_dataset
from groupface.evaluation import AblationSuite, ablation_variant
from groupface.model import GroupFaceModel, ModelConfig
from groupface.training import TrainConfig, train


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        input_dim=8,
        shared_dim=16,
        embed_dim=8,
        num_groups=4,
        num_identities=10,
        gdn_hidden_dim=8,
        backbone_layers=[16],
    )
    base.update(kw)
    return ModelConfig(**base)


def brute_tar_at_far(genuine, impostor, far):
    """Scan every observed score (and -inf) as a threshold; accept score > t."""
    candidates = sorted(set(genuine) | set(impostor) | {float("-inf")})
    best = None
    for t in candidates:
        above = sum(1 for s in impostor if s > t)
        if above / len(impostor) <= far and (best is None or t < best):
            best = t
    return sum(1 for s in genuine if s > best) / len(genuine)


def brute_pair_accuracy(pairs):
    """Try the midpoint between every pair of adjacent distinct scores, plus both ends."""
    scores = sorted({s for s, _ in pairs})
    thresholds = [scores[0] - 1.0, scores[-1] + 1.0]
    thresholds += [(a + b) / 2 for a, b in zip(scores, scores[1:])]
    best = 0
    for t in thresholds:
        correct = sum(1 for s, same in pairs if (s > t) == bool(same))
        best = max(best, correct)
    return best / len(pairs)


@lru_cache(maxsize=1)
def benchmark_data():
    return generate_synthetic_dataset(SyntheticDataConfig())


@lru_cache(maxsize=None)
def benchmark_run(name: str, seed: int):
    """Train one ablation variant on the default benchmark (cached for the session)."""
    suite = AblationSuite()
    m, lo, t = ablation_variant(name, suite.model, suite.loss, TrainConfig(seed=seed))
    model = GroupFaceModel(m, seed=seed)
    start = time.perf_counter()
    art = train(model, benchmark_data(), lo, t, evaluate_at_end=False)
    art.extras["seconds"] = time.perf_counter() - start
    return model, art
