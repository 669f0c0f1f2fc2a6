"""Dual-head transformer classification: a pooled classifier head trained
jointly with a train-only rationale LM head, plus the ablation and
throughput tooling around it."""

from .estimator import DualHeadClassifier
from .losses import LossWeights
from .model import DecodeSettings, DualHeadModel, ModelConfig, load_checkpoint, save_checkpoint
from .sequences import AblationSetting, Example

__all__ = [
    "AblationSetting",
    "DecodeSettings",
    "DualHeadClassifier",
    "DualHeadModel",
    "Example",
    "LossWeights",
    "ModelConfig",
    "load_checkpoint",
    "save_checkpoint",
]

__version__ = "0.1.0"
