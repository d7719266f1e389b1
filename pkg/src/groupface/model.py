"""Group-aware embedding network.

Layout of :class:`GroupFaceModel` (``B`` is a batch-norm, ``F`` a fully
connected layer, ``R`` a ReLU)::

    x -> [F-B-R] * len(backbone_layers) -> B-F = shared feature
    shared -> F = v_x                     (instance head)
    shared -> F_k = v_x^{G_k}, k < K      (group heads)
    v_x -> B-F-R -> B-F = v_hat -> R-F -> softmax = p(G_k|x)   (group decision net)
    v_G = soft / hard ensemble of the group heads under p
    v_bar = v_x + v_G  (or [v_x, v_G])
    logits = cos(v_bar, W_j)

``ensemble_mode="none"`` is the instance-only baseline: the group decision
net still runs (its outputs feed labeling statistics and the group-aware
similarity) but ``v_bar = v_x``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import BatchNormStats, Tensor, record

ENSEMBLE_MODES = ("soft", "hard", "none")
FUSION_MODES = ("aggregate", "concatenate")


@dataclass
class ModelConfig:
    input_dim: int = 32
    shared_dim: int = 64
    embed_dim: int = 32
    num_groups: int = 8
    num_identities: int = 200
    gdn_hidden_dim: int = 32
    ensemble_mode: str = "soft"
    fusion_mode: str = "aggregate"
    backbone_layers: list[int] = field(default_factory=lambda: [64])
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        self.backbone_layers = [int(w) for w in self.backbone_layers]
        dims = [self.input_dim, self.shared_dim, self.embed_dim, self.gdn_hidden_dim, *self.backbone_layers]
        if any(d <= 0 for d in dims):
            raise ValueError(f"all dimensions must be positive: {dims}")
        if self.num_groups < 2:
            raise ValueError("num_groups must be at least 2")
        if self.num_identities < 2:
            raise ValueError("num_identities must be at least 2")
        if self.ensemble_mode not in ENSEMBLE_MODES:
            raise ValueError(f"ensemble_mode must be one of {ENSEMBLE_MODES}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")

    @property
    def classifier_dim(self) -> int:
        if self.fusion_mode == "concatenate" and self.ensemble_mode != "none":
            return 2 * self.embed_dim
        return self.embed_dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutputs:
    shared_feature: Tensor
    v_x: Tensor
    group_reps: list[Tensor]
    gdn_logits: Tensor
    group_probs: Tensor
    gdn_intermediate: Tensor
    v_G: Tensor | None
    v_bar: Tensor
    logits: Tensor


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class GroupFaceModel:
    """Parameters and batch-norm statistics, in declaration order."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormStats] = {}
        self.group_state = None
        rng = np.random.default_rng(seed)
        c = config

        width = c.input_dim
        for i, w in enumerate(c.backbone_layers):
            self._fc(f"backbone.{i}.fc", width, w, rng)
            self._bn(f"backbone.{i}.bn", w)
            width = w
        self._bn("shared.bn", width)
        self._fc("shared.fc", width, c.shared_dim, rng)
        self._fc("instance", c.shared_dim, c.embed_dim, rng)
        for k in range(c.num_groups):
            self._fc(f"group.{k}", c.shared_dim, c.embed_dim, rng)
        self._bn("gdn.bn1", c.embed_dim)
        self._fc("gdn.fc1", c.embed_dim, c.gdn_hidden_dim, rng)
        self._bn("gdn.bn2", c.gdn_hidden_dim)
        self._fc("gdn.fc2", c.gdn_hidden_dim, c.gdn_hidden_dim, rng)
        self._fc("gdn.out", c.gdn_hidden_dim, c.num_groups, rng)
        d = c.classifier_dim
        self._param("classifier.W", _uniform(rng, d, (c.num_identities, d)))

    def _param(self, name: str, value) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _fc(self, name: str, fan_in: int, fan_out: int, rng) -> None:
        self._param(f"{name}.W", _uniform(rng, fan_in, (fan_in, fan_out)))
        self._param(f"{name}.b", np.zeros(fan_out))

    def _bn(self, name: str, dim: int) -> None:
        self._param(f"{name}.gamma", np.ones(dim))
        self._param(f"{name}.beta", np.zeros(dim))
        self.bn[name] = BatchNormStats(dim, momentum=self.config.bn_momentum)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        nx.zero_grad(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_group_heads(self) -> None:
        for k in range(self.config.num_groups):
            self.params[f"group.{k}.W"].data[...] = 0.0
            self.params[f"group.{k}.b"].data[...] = 0.0

    def copy_from(self, other: "GroupFaceModel", skip_prefix: Sequence[str] = ()) -> None:
        """Copy matching parameters and batch-norm statistics from ``other``."""
        for name, p in self.params.items():
            if any(name.startswith(s) for s in skip_prefix) or name not in other.params:
                continue
            if other.params[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {other.params[name].shape} vs {p.shape}")
            p.data[...] = other.params[name].data
        for name, s in self.bn.items():
            if name in other.bn:
                s.running_mean = other.bn[name].running_mean.copy()
                s.running_var = other.bn[name].running_var.copy()

    def forward(self, x, mode: str = "train", update_stats: bool = True) -> ForwardOutputs:
        return forward(self, x, mode, update_stats=update_stats)

    def flops_per_sample(self) -> int:
        """Multiply-adds of every fully connected layer, for one sample.

        Hard ensembling evaluates a single group head, soft ensembling all of
        them, the baseline none.
        """
        c = self.config
        total = 0
        for name, p in self.params.items():
            if not name.endswith(".W") or name == "classifier.W":
                continue
            if name.startswith("group."):
                continue
            total += p.size
        head = c.shared_dim * c.embed_dim
        if c.ensemble_mode == "soft":
            total += c.num_groups * head
        elif c.ensemble_mode == "hard":
            total += head
        return int(total)


def _bn(model: GroupFaceModel, name: str, x: Tensor, mode: str, update_stats: bool) -> Tensor:
    p = model.params
    return nx.batch_norm(
        x,
        p[f"{name}.gamma"],
        p[f"{name}.beta"],
        mode=mode,
        eps=model.config.bn_eps,
        stats=model.bn[name],
        update_stats=update_stats,
    )


def _fc(model: GroupFaceModel, name: str, x: Tensor) -> Tensor:
    return nx.fully_connected(x, model.params[f"{name}.W"], model.params[f"{name}.b"])


def _reps_array(group_reps) -> list[Tensor]:
    reps = [nx.as_tensor(r) for r in group_reps]
    if not reps:
        raise ValueError("no group representations given")
    shape = reps[0].shape
    for r in reps:
        if r.shape != shape:
            raise ValueError(f"group representations disagree in shape: {r.shape} vs {shape}")
    return reps


def soft_ensemble(group_probs, group_reps) -> Tensor:
    """sum_k p[:, k] * rep_k."""
    p = nx.as_tensor(group_probs)
    reps = _reps_array(group_reps)
    if p.data.ndim != 2 or p.shape[1] != len(reps) or p.shape[0] != reps[0].shape[0]:
        raise ValueError(f"probabilities {p.shape} do not match {len(reps)} representations of {reps[0].shape}")
    out = np.zeros_like(reps[0].data)
    for k, r in enumerate(reps):
        out += p.data[:, k : k + 1] * r.data

    def _backward(g):
        dp = np.stack([(g * r.data).sum(axis=1) for r in reps], axis=1)
        return (dp, *(p.data[:, k : k + 1] * g for k in range(len(reps))))

    return record(out, (p, *reps), _backward, "soft_ensemble")


def hard_ensemble(group_probs, group_reps) -> Tensor:
    """Per row, the representation of the most probable group (lowest index on ties).

    No gradient reaches the probabilities.
    """
    p = nx.as_tensor(group_probs)
    reps = _reps_array(group_reps)
    if p.data.ndim != 2 or p.shape[1] != len(reps) or p.shape[0] != reps[0].shape[0]:
        raise ValueError(f"probabilities {p.shape} do not match {len(reps)} representations of {reps[0].shape}")
    choice = np.argmax(p.data, axis=1)
    stacked = np.stack([r.data for r in reps], axis=0)
    rows = np.arange(p.shape[0])
    out = stacked[choice, rows]

    def _backward(g):
        grads = []
        for k in range(len(reps)):
            mask = (choice == k)[:, None]
            grads.append(np.where(mask, g, 0.0))
        return (None, *grads)

    return record(out, (p, *reps), _backward, "hard_ensemble", branch=choice)


def fuse(v_x, v_G, fusion_mode: str) -> Tensor:
    v_x, v_G = nx.as_tensor(v_x), nx.as_tensor(v_G)
    if v_x.shape != v_G.shape:
        raise ValueError(f"cannot fuse {v_x.shape} with {v_G.shape}")
    if fusion_mode == "aggregate":
        return nx.add(v_x, v_G)
    if fusion_mode == "concatenate":
        return nx.concat([v_x, v_G], axis=1)
    raise ValueError(f"unknown fusion mode {fusion_mode!r}")


def identity_logits(v, W) -> Tensor:
    """Cosine between every feature row and every classifier row."""
    v, W = nx.as_tensor(v), nx.as_tensor(W)
    if v.shape[-1] != W.shape[-1]:
        raise ValueError(f"feature dim {v.shape[-1]} does not match classifier dim {W.shape[-1]}")
    return nx.matmul(nx.l2_normalize(v), nx.transpose(nx.l2_normalize(W)))


def gdn_forward(model: GroupFaceModel, v_x: Tensor, mode: str, update_stats: bool = True):
    h = nx.relu(_fc(model, "gdn.fc1", _bn(model, "gdn.bn1", v_x, mode, update_stats)))
    v_hat = _fc(model, "gdn.fc2", _bn(model, "gdn.bn2", h, mode, update_stats))
    logits = _fc(model, "gdn.out", nx.relu(v_hat))
    return logits, v_hat


def forward(model: GroupFaceModel, x, mode: str = "train", update_stats: bool = True) -> ForwardOutputs:
    c = model.config
    x = nx.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != c.input_dim:
        raise ValueError(f"input has shape {x.shape}, model expects (N, {c.input_dim})")
    if not np.isfinite(x.data).all():
        raise ValueError("input contains non-finite values")

    h = x
    for i in range(len(c.backbone_layers)):
        h = nx.relu(_bn(model, f"backbone.{i}.bn", _fc(model, f"backbone.{i}.fc", h), mode, update_stats))
    # the shared block ends in its FC; a ReLU here gives every embedding a common
    # positive component and lets the margin loss collapse all features together
    shared = _fc(model, "shared.fc", _bn(model, "shared.bn", h, mode, update_stats))

    v_x = _fc(model, "instance", shared)
    gdn_logits, v_hat = gdn_forward(model, v_x, mode, update_stats)
    probs = nx.softmax(gdn_logits)

    if c.ensemble_mode == "none":
        group_reps: list[Tensor] = []
        v_G = None
        v_bar = v_x
    else:
        group_reps = [_fc(model, f"group.{k}", shared) for k in range(c.num_groups)]
        ensemble = soft_ensemble if c.ensemble_mode == "soft" else hard_ensemble
        v_G = ensemble(probs, group_reps)
        v_bar = fuse(v_x, v_G, c.fusion_mode)

    logits = identity_logits(v_bar, model.params["classifier.W"])
    return ForwardOutputs(
        shared_feature=shared,
        v_x=v_x,
        group_reps=group_reps,
        gdn_logits=gdn_logits,
        group_probs=probs,
        gdn_intermediate=v_hat,
        v_G=v_G,
        v_bar=v_bar,
        logits=logits,
    )
