"""Two-phase training with SGD.

Phase 1 optimises the identity loss alone while the group state is warmed
with every batch.  Phase 2 adds the self-grouping loss on labels rebuilt
from the live group probabilities each step.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import save_checkpoint
from .data import Dataset
from .grouping import GroupState, assign_labels_naive, assign_labels_self_distributed, merge
from .metrics import SimilarityConfig, kl_to_uniform
from .model import GroupFaceModel, forward, gdn_forward
from .objectives import LossConfig, margin_softmax_loss, self_grouping_loss

log = logging.getLogger(__name__)

# fraction of the run spent at each rate (50k / 20k / 10k steps at full scale)
_STAGE_FRACTIONS = (50 / 80, 20 / 80, 10 / 80)
_STAGE_RATES = (0.005, 0.0005, 0.00005)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became {value} at step {step}")
        self.step = step
        self.value = value


@dataclass
class TrainConfig:
    phase1_steps: int = 500
    phase2_steps: int = 2000
    batch_size: int = 128
    lr_schedule: list[tuple[int, float]] | None = None
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    window: int = 64
    labeling: str = "self"
    block_l2_backbone: bool = False
    num_workers: int = 1

    def __post_init__(self):
        if self.phase1_steps < 0 or self.phase2_steps < 0 or self.total_steps == 0:
            raise ValueError("step counts must be non-negative and not both zero")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if self.labeling not in ("self", "naive"):
            raise ValueError("labeling must be 'self' or 'naive'")
        if self.num_workers < 1 or self.batch_size // self.num_workers < 2:
            raise ValueError("every worker needs at least 2 samples per batch")
        if self.lr_schedule is None:
            self.lr_schedule = default_schedule(self.total_steps)
        self.lr_schedule = sorted((int(s), float(r)) for s, r in self.lr_schedule)
        if not self.lr_schedule or self.lr_schedule[0][0] != 0:
            raise ValueError("learning-rate schedule must start at step 0")
        if any(r <= 0 for _, r in self.lr_schedule):
            raise ValueError("learning rates must be positive")

    @property
    def total_steps(self) -> int:
        return self.phase1_steps + self.phase2_steps

    def lr_at(self, step: int) -> float:
        rate = self.lr_schedule[0][1]
        for start, r in self.lr_schedule:
            if step >= start:
                rate = r
        return rate


def default_schedule(total_steps: int, rates=_STAGE_RATES) -> list[tuple[int, float]]:
    bounds = np.cumsum((0.0,) + _STAGE_FRACTIONS[:-1]) * total_steps
    return [(int(round(b)), r) for b, r in zip(bounds, rates)]


def parse_schedule(text: str) -> list[tuple[int, float]]:
    """``"0:0.005, 1250:0.0005"`` -> [(0, 0.005), (1250, 0.0005)]."""
    out = []
    for item in text.split(","):
        if item.strip():
            step, rate = item.split(":")
            out.append((int(step), float(rate)))
    return out


class SGD:
    """Momentum SGD with L2 weight decay; parameters without a gradient are left alone."""

    def __init__(self, named_params: dict[str, nx.Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = named_params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data -= lr * v


@dataclass
class RunArtifacts:
    loss_curve: list[dict]
    label_trace: np.ndarray
    checkpoint_path: Path | None = None
    report: object = None
    group_state: GroupState | None = None
    extras: dict = field(default_factory=dict)

    def losses(self) -> np.ndarray:
        return np.array([row["loss"] for row in self.loss_curve])

    def final_label_kl(self, last: int | None = None) -> float:
        """KL to uniform of labels pooled over the last ``last`` steps (default: one window)."""
        last = last or self.extras.get("window", 64)
        return kl_to_uniform(self.label_trace[-last:].sum(axis=0))

    def write_csvs(self, out_dir) -> None:
        out = Path(out_dir)
        with open(out / "loss_curve.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.loss_curve[0].keys()))
            w.writeheader()
            for row in self.loss_curve:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        with open(out / "label_trace.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            k = self.label_trace.shape[1]
            w.writerow(["step"] + [f"group_{i}" for i in range(k)] + ["kl_to_uniform"])
            for step, row in zip((r["step"] for r in self.loss_curve), self.label_trace):
                w.writerow([step, *row.tolist(), repr(kl_to_uniform(row))])


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of batch ``step``: epochs are seeded permutations, the tail is dropped."""
    per_epoch = max(n // batch_size, 1)
    epoch, j = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[j * batch_size : (j + 1) * batch_size]


def _labels(probs: np.ndarray, state: GroupState, labeling: str) -> np.ndarray:
    if labeling == "naive":
        return assign_labels_naive(probs)
    return assign_labels_self_distributed(probs, state)


def train(
    model: GroupFaceModel,
    data: Dataset,
    losses: LossConfig,
    tcfg: TrainConfig,
    out_dir=None,
    optimizer: SGD | None = None,
    start_step: int = 0,
    sim_cfg: SimilarityConfig | None = None,
    evaluate_at_end: bool = True,
    stop_step: int | None = None,
) -> RunArtifacts:
    """Train ``model`` on ``data.train()``; evaluate on ``data.eval()`` when present.

    Steps ``start_step .. stop_step - 1`` are executed (default: to the end of
    the schedule).  Pass the optimizer and model restored from a checkpoint to
    continue a run exactly.
    """
    from .evaluation import evaluate

    train_set = data.train() if (data.split == 1).any() else data
    c = model.config
    if train_set.input_dim != c.input_dim:
        raise ValueError(f"data has {train_set.input_dim} features, model expects {c.input_dim}")
    if train_set.identity_labels.max() >= c.num_identities:
        raise ValueError(
            f"training labels reach {train_set.identity_labels.max()}, classifier has {c.num_identities} rows"
        )
    if len(train_set) < tcfg.batch_size:
        raise ValueError("fewer training samples than one batch")

    x_all, y_all = train_set.features, train_set.identity_labels
    if model.group_state is None:
        model.group_state = GroupState(c.num_groups, tcfg.window)
    state = model.group_state
    workers = tcfg.num_workers
    worker_states = [GroupState(c.num_groups, tcfg.window) for _ in range(workers)] if workers > 1 else None
    opt = optimizer or SGD(model.params, tcfg.momentum, tcfg.weight_decay)

    stop = tcfg.total_steps if stop_step is None else min(stop_step, tcfg.total_steps)
    if not 0 <= start_step <= stop:
        raise ValueError(f"cannot run steps {start_step}..{stop}")
    curve: list[dict] = []
    trace: list[np.ndarray] = []
    for step in range(start_step, stop):
        phase = 1 if step < tcfg.phase1_steps else 2
        lr = tcfg.lr_at(step)
        idx = batch_indices(len(train_set), tcfg.batch_size, tcfg.seed, step)
        shards = np.array_split(idx, workers)
        model.zero_grad()

        try:
            outs = [forward(model, x_all[s], "train") for s in shards]
        except nx.NonFiniteError as exc:
            raise TrainingDiverged(step, float("nan")) from exc
        if worker_states is not None:
            for ws, o in zip(worker_states, outs):
                ws.update(o.group_probs.data)
            state = merge(worker_states)
            model.group_state = state
        else:
            state.update(outs[0].group_probs.data)

        l1_sum = l2_sum = 0.0
        counts = np.zeros(c.num_groups, dtype=np.int64)
        total = 0.0
        for s, o in zip(shards, outs):
            labels = _labels(o.group_probs.data, state, tcfg.labeling)
            counts += np.bincount(labels, minlength=c.num_groups)
            l1 = margin_softmax_loss(o.logits, y_all[s], losses)
            loss = l1
            l2_val = float("nan")
            if phase == 2 and losses.lam > 0:
                gdn_logits = o.gdn_logits
                if tcfg.block_l2_backbone:
                    gdn_logits, _ = gdn_forward(model, o.v_x.detach(), "train", update_stats=False)
                l2 = self_grouping_loss(gdn_logits, labels)
                l2_val = l2.item()
                loss = nx.add(l1, nx.scale(l2, losses.lam))
            if workers > 1:
                loss = nx.scale(loss, 1.0 / workers)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            nx.backward(loss)
            total += value
            l1_sum += l1.item() / workers
            l2_sum += l2_val / workers
        opt.step(lr)
        if not all(np.isfinite(p.data).all() for p in model.params.values()):
            raise TrainingDiverged(step, float("nan"))

        curve.append({"step": step, "phase": phase, "lr": lr, "loss": total, "l1": l1_sum, "l2": l2_sum})
        trace.append(counts)
        if step % 500 == 0:
            log.info("step %d phase %d lr %.2g loss %.4f", step, phase, lr, total)

    artifacts = RunArtifacts(
        loss_curve=curve,
        label_trace=np.array(trace, dtype=np.int64).reshape(-1, c.num_groups),
        group_state=model.group_state,
        extras={"window": tcfg.window},
    )
    if evaluate_at_end and stop == tcfg.total_steps and (data.split == 1).any():
        artifacts.report = evaluate(model, data.eval(), sim_cfg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        artifacts.checkpoint_path = save_checkpoint(
            out / "model.ckpt", model, opt, extras={"step": stop, "seed": tcfg.seed}
        )
        if curve:
            artifacts.write_csvs(out)
        if artifacts.report is not None:
            artifacts.report.save(out / "report.json")
    return artifacts


def resume(checkpoint, data: Dataset, losses: LossConfig, tcfg: TrainConfig, out_dir=None, **kw) -> tuple[GroupFaceModel, RunArtifacts]:
    """Continue the run saved in ``checkpoint`` to the end of ``tcfg``."""
    from .checkpoint import load_checkpoint

    model, velocities, extras = load_checkpoint(checkpoint)
    opt = SGD(model.params, tcfg.momentum, tcfg.weight_decay)
    opt.velocity.update(velocities)
    art = train(model, data, losses, tcfg, out_dir=out_dir, optimizer=opt, start_step=int(extras["step"]), **kw)
    return model, art
