"""Masked-autoencoder pretraining and few-label fine-tuning for raw-IQ modulation classification."""

from .estimators import MAEPretrainer, RISMAEClassifier
from .losses import cross_entropy, masked_mse, softmax_cross_entropy
from .metrics import MetricsReport, confusion_matrix, evaluate, evaluate_dataset, kappa, overall_accuracy
from .model import (
    MaskPlan,
    ModelConfig,
    RISMAE,
    classify,
    full_plan,
    load_checkpoint,
    patchify,
    sample_mask,
    save_checkpoint,
    unpatchify,
)
from .train import LossTrace, TrainConfig, finetune, lr_at, pretrain, select_finetune_labels

__version__ = "0.1.0"

__all__ = [
    "MAEPretrainer", "RISMAEClassifier", "cross_entropy", "masked_mse",
    "softmax_cross_entropy", "MetricsReport", "confusion_matrix", "evaluate",
    "evaluate_dataset", "kappa", "overall_accuracy", "MaskPlan", "ModelConfig", "RISMAE",
    "classify", "full_plan", "load_checkpoint", "patchify", "sample_mask", "save_checkpoint",
    "unpatchify", "LossTrace", "TrainConfig", "finetune", "lr_at", "pretrain",
    "select_finetune_labels",
]
