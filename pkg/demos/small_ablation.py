"""A reduced ablation table: baseline against hard and soft ensembles.

Run: python demos/small_ablation.py [--steps 1000] [--seeds 0,1]
"""

import argparse

from groupface import AblationSuite, TrainConfig, run_ablation

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=1000)
parser.add_argument("--seeds", default="0,1")
args = parser.parse_args()

p1 = args.steps // 5
suite = AblationSuite(
    configs=["baseline", "h_groupface", "s_groupface", "naive_labeling"],
    seeds=[int(s) for s in args.seeds.split(",")],
    train=TrainConfig(phase1_steps=p1, phase2_steps=args.steps - p1),
)
rows = run_ablation(suite)
print(f"{'config':>15} {'pair acc':>9} {'rank-1':>7} {'TAR@1e-3':>9} {'label KL':>9} {'params':>7}")
for r in rows:
    if r["seed"] == "mean":
        print(f"{r['config']:>15} {r['pair_accuracy']:9.4f} {r['rank1']:7.4f} {r['tar@far=0.001']:9.4f} "
              f"{r['train_label_kl']:9.4f} {int(r['params']):7d}")
