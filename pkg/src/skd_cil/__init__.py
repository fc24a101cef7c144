"""Exemplar-free class-incremental learning with a self-distilled knowledge delegator."""

from .cil import CilTrainConfig, RunFlags, make_pseudo_batch, mix_batch, run_sequence, train_cil_task
from .data import DataSource, DatasetSpec, TaskSequence, build_task_sequence
from .delegate import SkdTrainConfig, SkdTrainResult, train_skd
from .estimator import SKDIncrementalClassifier
from .evalkit import RunReport, top1_accuracy
from .losses import ExploreWeights, GammaSchedule, adaptive_gamma
from .networks import ClassifierModel, Delegator, build_classifier, build_delegator

__version__ = "0.1.0"

__all__ = [
    "CilTrainConfig", "ClassifierModel", "DataSource", "DatasetSpec", "Delegator", "ExploreWeights",
    "GammaSchedule", "RunFlags", "RunReport", "SKDIncrementalClassifier", "SkdTrainConfig",
    "SkdTrainResult", "TaskSequence", "adaptive_gamma", "build_classifier", "build_delegator",
    "build_task_sequence", "make_pseudo_batch", "mix_batch", "run_sequence", "top1_accuracy",
    "train_cil_task", "train_skd",
]
