"""Compositional contrastive fine-tuning with typed hard negatives."""

__version__ = "0.1.0"

from .encoder import ModelParams, Vocabulary, init_params
from .evalbench import BenchItem, EvalReport, evaluate, pairwise_accuracy
from .hardneg import PLACEHOLDER, HardNegativeSet, NegType
from .losses import HnSims, ThresholdState, total_loss
from .synthworld import WorldSpec, make_dataset
from .trainer import TrainConfig, train

__all__ = [
    "BenchItem",
    "EvalReport",
    "HardNegativeSet",
    "HnSims",
    "ModelParams",
    "NegType",
    "PLACEHOLDER",
    "ThresholdState",
    "TrainConfig",
    "Vocabulary",
    "WorldSpec",
    "evaluate",
    "init_params",
    "make_dataset",
    "pairwise_accuracy",
    "total_loss",
    "train",
]
