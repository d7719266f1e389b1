"""Group-aware face embeddings on numpy: model, self-distributed grouping, losses, metrics and a synthetic benchmark."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, SyntheticDataConfig, generate_synthetic_dataset, load_dataset, save_dataset
from .evaluation import AblationSuite, evaluate, export_embeddings, run_ablation
from .grouping import (
    GroupState,
    assign_labels_naive,
    assign_labels_self_distributed,
    current_expectation,
    expectation_normalized_probability,
    merge,
    update_expectation,
)
from .metrics import (
    EvalReport,
    SimilarityConfig,
    group_aware_similarity,
    label_distribution_stats,
    pair_verification_accuracy,
    rank1_identification,
    tar_at_far,
)
from .model import ForwardOutputs, GroupFaceModel, ModelConfig, forward
from .objectives import LossConfig, combined_loss, margin_softmax_loss, self_grouping_loss
from .training import RunArtifacts, TrainConfig, TrainingDiverged, train

__all__ = [
    "AblationSuite",
    "Dataset",
    "EvalReport",
    "ForwardOutputs",
    "GroupFaceModel",
    "GroupState",
    "LossConfig",
    "ModelConfig",
    "RunArtifacts",
    "SimilarityConfig",
    "SyntheticDataConfig",
    "TrainConfig",
    "TrainingDiverged",
    "assign_labels_naive",
    "assign_labels_self_distributed",
    "combined_loss",
    "current_expectation",
    "evaluate",
    "expectation_normalized_probability",
    "export_embeddings",
    "forward",
    "generate_synthetic_dataset",
    "group_aware_similarity",
    "label_distribution_stats",
    "load_checkpoint",
    "load_dataset",
    "margin_softmax_loss",
    "merge",
    "pair_verification_accuracy",
    "rank1_identification",
    "run_ablation",
    "save_checkpoint",
    "save_dataset",
    "self_grouping_loss",
    "tar_at_far",
    "train",
    "update_expectation",
]
