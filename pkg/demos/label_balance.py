"""Compare naive argmax labels with expectation-normalised labels during training.

Run: python demos/label_balance.py [--steps 1000]
"""

import argparse

from groupface import (
    GroupFaceModel,
    LossConfig,
    ModelConfig,
    SyntheticDataConfig,
    TrainConfig,
    generate_synthetic_dataset,
    train,
)
from groupface.metrics import kl_to_uniform

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=1000)
args = parser.parse_args()

data = generate_synthetic_dataset(SyntheticDataConfig(seed=0))
p1 = args.steps // 5
traces = {}
for labeling in ("naive", "self"):
    model = GroupFaceModel(ModelConfig(), seed=0)
    tcfg = TrainConfig(phase1_steps=p1, phase2_steps=args.steps - p1, labeling=labeling)
    traces[labeling] = train(model, data, LossConfig(), tcfg, evaluate_at_end=False).label_trace

# KL of the label histogram pooled over consecutive 64-step windows
print(f"{'steps':>12} {'naive':>8} {'self':>8}")
for start in range(0, args.steps, 64 * max(1, args.steps // 640)):
    kl = {k: kl_to_uniform(t[start : start + 64].sum(axis=0)) for k, t in traces.items()}
    print(f"{start:>5}-{start + 63:<6} {kl['naive']:8.4f} {kl['self']:8.4f}")
