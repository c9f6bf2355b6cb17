"""Adversarial fine-tuning of a miniature detector with feature alignment."""

from .align import AlignConfig, FeatureNorm, ForegroundMaskSet, alignment_loss, \
    decoupled_level_loss, make_masks
from .attack import AttackConfig, generate_adversarial, pgd_step
from .boxes import BoxSet, DetectionSet
from .corruption import CORRUPTION_KINDS, CorruptionSpec, corrupt
from .data import Dataset, ImageBatch, SyntheticDatasetSpec, generate_dataset, \
    load_dataset
from .detector import ArchConfig, FeaturePyramid, NormMode, TinyDetector, build_detector
from .experiment import EvalConfig, ExperimentConfig, run_experiment
from .metrics import MetricReport, adversarial_ap, average_precision, clean_ap, \
    evaluate_model, mpc
from .train import TrainConfig, TrainMode, fit, total_loss, train_step

__version__ = "0.1.0"

__all__ = [
    "AlignConfig", "FeatureNorm", "ForegroundMaskSet", "alignment_loss",
    "decoupled_level_loss", "make_masks",
    "AttackConfig", "generate_adversarial", "pgd_step",
    "BoxSet", "DetectionSet",
    "CORRUPTION_KINDS", "CorruptionSpec", "corrupt",
    "Dataset", "ImageBatch", "SyntheticDatasetSpec", "generate_dataset", "load_dataset",
    "ArchConfig", "FeaturePyramid", "NormMode", "TinyDetector", "build_detector",
    "EvalConfig", "ExperimentConfig", "run_experiment",
    "MetricReport", "adversarial_ap", "average_precision", "clean_ap",
    "evaluate_model", "mpc",
    "TrainConfig", "TrainMode", "fit", "total_loss", "train_step",
]
