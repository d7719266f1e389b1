"""Evaluation harness, embedding export and ablation runs."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, SyntheticDataConfig, generate_synthetic_dataset, write_labels, write_matrix
from .metrics import (
    DEFAULT_FAR_LEVELS,
    EvalReport,
    Embeddings,
    SimilarityConfig,
    label_distribution_stats,
    make_similarity,
    pair_accuracy_arrays,
    rank1_identification,
    tar_at_far,
)
from .model import GroupFaceModel, ModelConfig, forward
from .objectives import LossConfig

MAX_PAIRS = 2_000_000


@dataclass
class EmbeddedSet:
    v_x: np.ndarray
    v_bar: np.ndarray
    v_hat: np.ndarray
    probs: np.ndarray
    identity: np.ndarray

    def embeddings(self) -> Embeddings:
        return Embeddings(self.v_bar, self.v_hat)


def embed(model: GroupFaceModel, data: Dataset, batch_size: int = 512) -> EmbeddedSet:
    parts: dict[str, list[np.ndarray]] = {"v_x": [], "v_bar": [], "v_hat": [], "probs": []}
    for start in range(0, len(data), batch_size):
        out = forward(model, data.features[start : start + batch_size], "eval")
        parts["v_x"].append(out.v_x.data)
        parts["v_bar"].append(out.v_bar.data)
        parts["v_hat"].append(out.gdn_intermediate.data)
        parts["probs"].append(out.group_probs.data)
    return EmbeddedSet(**{k: np.concatenate(v) for k, v in parts.items()}, identity=data.identity_labels.copy())


def pair_scores(emb: Embeddings, identity: np.ndarray, similarity, max_pairs: int = MAX_PAIRS, seed: int = 0):
    """Scores and same-identity flags of every unordered pair (seeded subsample above ``max_pairs``)."""
    n = len(identity)
    iu, ju = np.triu_indices(n, k=1)
    if iu.size > max_pairs:
        keep = np.sort(np.random.default_rng(seed).choice(iu.size, size=max_pairs, replace=False))
        iu, ju = iu[keep], ju[keep]
    scores = similarity(emb, emb)[iu, ju]
    return scores, identity[iu] == identity[ju]


def balanced_pairs(scores: np.ndarray, same: np.ndarray, seed: int = 0):
    """All genuine pairs plus an equal-sized seeded draw of impostor pairs."""
    pos = np.flatnonzero(same)
    neg = np.flatnonzero(~same)
    if neg.size > pos.size:
        neg = np.sort(np.random.default_rng(seed).choice(neg, size=pos.size, replace=False))
    keep = np.concatenate([pos, neg])
    return scores[keep], same[keep]


def gallery_split(identity: np.ndarray):
    """First sample of each identity is its gallery entry; the rest are probes."""
    _, first = np.unique(identity, return_index=True)
    is_gallery = np.zeros(identity.size, dtype=bool)
    is_gallery[first] = True
    return np.flatnonzero(is_gallery), np.flatnonzero(~is_gallery)


def evaluate(
    model: GroupFaceModel,
    eval_data: Dataset,
    sim_cfg: SimilarityConfig | None = None,
    use_group_similarity: bool = False,
    far_levels: Sequence[float] = DEFAULT_FAR_LEVELS,
    max_pairs: int = MAX_PAIRS,
    seed: int = 0,
    roc_csv=None,
) -> EvalReport:
    if (eval_data.split == 0).any():
        raise ValueError("evaluation data contains training-split samples")
    if eval_data.identity_labels.size and eval_data.identity_labels.min() < model.config.num_identities:
        raise ValueError("evaluation identities overlap the classifier's training identities")
    ids = eval_data.identity_labels
    if np.unique(ids).size < 2:
        raise ValueError("need at least two evaluation identities")

    emb_set = embed(model, eval_data)
    emb = emb_set.embeddings()
    sim = make_similarity(use_group_similarity, sim_cfg)

    scores, same = pair_scores(emb, ids, sim, max_pairs, seed)
    if not same.any():
        raise ValueError("no genuine pairs: every evaluation identity has a single sample")
    tar = tar_at_far(scores[same], scores[~same], far_levels)
    if roc_csv is not None:
        from .metrics import write_roc_csv

        write_roc_csv(roc_csv, scores[same], scores[~same])
    bs, bsame = balanced_pairs(scores, same, seed)
    pair_acc = pair_accuracy_arrays(bs, bsame)

    gal, probe = gallery_split(ids)
    rank1 = rank1_identification(emb.take(probe), ids[probe], emb.take(gal), ids[gal], sim) if probe.size else 1.0

    hist, kl = label_distribution_stats(np.argmax(emb_set.probs, axis=1), model.config.num_groups)
    return EvalReport(
        tar_at_far=tar,
        rank1=rank1,
        pair_accuracy=pair_acc,
        label_histogram=hist.tolist(),
        kl_to_uniform=kl,
    )


def export_embeddings(model: GroupFaceModel, data: Dataset, path) -> Path:
    """Write per-sample v_x, v_bar, v_hat and p(G_k|x) as one float64 matrix plus a JSON sidecar."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create export directory {out}: {exc}") from exc
    e = embed(model, data)
    blocks = [("v_x", e.v_x), ("v_bar", e.v_bar), ("v_hat", e.v_hat), ("group_probs", e.probs)]
    columns, start = {}, 0
    for name, arr in blocks:
        columns[name] = {"start": start, "stop": start + arr.shape[1]}
        start += arr.shape[1]
    write_matrix(out / "embeddings.bin", np.concatenate([a for _, a in blocks], axis=1), dtype=np.float64)
    write_labels(out / "identity_labels.bin", data.identity_labels)
    write_labels(out / "split.bin", data.split)
    sidecar = {
        "format": "groupface-embeddings",
        "records": len(data),
        "files": {"embeddings": "embeddings.bin", "identity_labels": "identity_labels.bin", "split": "split.bin"},
        "columns": columns,
        "roles": {
            "v_x": "instance representation",
            "v_bar": "final representation",
            "v_hat": "group decision network intermediate feature",
            "group_probs": "group probabilities, rows sum to 1",
        },
    }
    (out / "embeddings.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return out


# -- ablation ---------------------------------------------------------------

ABLATION_CONFIGS = (
    "baseline",
    "h_groupface",
    "s_groupface",
    "naive_labeling",
    "no_l2",
    "concat_fusion",
    "k4",
    "k16",
    "k32",
)


@dataclass
class AblationSuite:
    configs: list[str] = field(default_factory=lambda: list(ABLATION_CONFIGS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    data: SyntheticDataConfig = field(default_factory=SyntheticDataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: object = None
    sim: SimilarityConfig = field(default_factory=SimilarityConfig)
    far_levels: Sequence[float] = DEFAULT_FAR_LEVELS


def ablation_variant(name: str, model: ModelConfig, loss: LossConfig, tcfg):
    """Model / loss / training configs for one named ablation row."""
    m, lo, t = replace(model), replace(loss), replace(tcfg, lr_schedule=list(tcfg.lr_schedule))
    if name == "baseline":
        m.ensemble_mode, lo.lam = "none", 0.0
    elif name == "h_groupface":
        m.ensemble_mode = "hard"
    elif name == "s_groupface":
        m.ensemble_mode = "soft"
    elif name == "naive_labeling":
        m.ensemble_mode, t.labeling = "soft", "naive"
    elif name == "no_l2":
        m.ensemble_mode, lo.lam = "soft", 0.0
    elif name == "concat_fusion":
        m.ensemble_mode, m.fusion_mode = "soft", "concatenate"
    elif name in ("k4", "k16", "k32"):
        m.ensemble_mode, m.num_groups = "soft", int(name[1:])
    else:
        raise ValueError(f"unknown ablation config {name!r}; choose from {ABLATION_CONFIGS}")
    return ModelConfig(**m.to_dict()), lo, t


def run_one(name: str, seed: int, data: Dataset, suite: AblationSuite) -> dict:
    from .training import TrainConfig, train

    tcfg = suite.train or TrainConfig()
    m, lo, t = ablation_variant(name, suite.model, suite.loss, replace(tcfg, seed=seed))
    m.input_dim = data.input_dim
    m.num_identities = int(data.train().identity_labels.max()) + 1
    model = GroupFaceModel(ModelConfig(**m.to_dict()), seed=seed)
    art = train(model, data, lo, t, evaluate_at_end=False)
    ev = data.eval()
    plain = evaluate(model, ev, suite.sim, False, suite.far_levels)
    grouped = evaluate(model, ev, suite.sim, True, suite.far_levels)
    row = {"config": name, "seed": seed}
    for far, v in plain.tar_at_far.items():
        row[f"tar@far={far:g}"] = v
    row["rank1"] = plain.rank1
    row["pair_accuracy"] = plain.pair_accuracy
    for far, v in grouped.tar_at_far.items():
        row[f"group_sim_tar@far={far:g}"] = v
    row["group_sim_pair_accuracy"] = grouped.pair_accuracy
    row["train_label_kl"] = art.final_label_kl()
    row["eval_label_kl"] = plain.kl_to_uniform
    row["final_loss"] = float(art.losses()[-1])
    row["params"] = model.num_parameters()
    row["flops_per_sample"] = model.flops_per_sample()
    return row


def run_ablation(suite: AblationSuite, out_csv=None, data: Dataset | None = None) -> list[dict]:
    """One row per (config, seed) plus one mean row per config."""
    data = data if data is not None else generate_synthetic_dataset(suite.data)
    rows = [run_one(name, seed, data, suite) for name in suite.configs for seed in suite.seeds]
    means = []
    for name in suite.configs:
        mine = [r for r in rows if r["config"] == name]
        mean = {"config": name, "seed": "mean"}
        for key in mine[0]:
            if key not in ("config", "seed"):
                mean[key] = float(np.mean([r[key] for r in mine]))
        means.append(mean)
    table = rows + means
    if out_csv is not None:
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(table[0].keys()))
            w.writeheader()
            for r in table:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return table
