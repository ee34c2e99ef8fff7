"""Desk-scale multi-scale interactive saliency network laboratory."""

from .backbone import BackboneConfig, FeaturePyramid, build_backbone, extract
from .data import (
    AugmentationConfig,
    PairDataset,
    SamplePair,
    augment,
    load_manifest,
    load_pairs,
    synth_generate,
)
from .losses import LossBreakdown, bcel, bcel_grad_analytic, cel, cel_grad_analytic, total_loss
from .metrics import MetricConfig, MetricReport, evaluate_dataset, evaluate_pairs
from .net import (
    DecoderState,
    MINet,
    ModelConfig,
    build_baseline,
    build_model,
    build_variant,
    load_checkpoint,
    save_checkpoint,
)
from .train import TrainConfig, TrainState, evaluate_checkpoint, poly_lr, train

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig",
    "BackboneConfig",
    "DecoderState",
    "FeaturePyramid",
    "LossBreakdown",
    "MINet",
    "MetricConfig",
    "MetricReport",
    "ModelConfig",
    "PairDataset",
    "SamplePair",
    "TrainConfig",
    "TrainState",
    "augment",
    "bcel",
    "bcel_grad_analytic",
    "build_backbone",
    "build_baseline",
    "build_model",
    "build_variant",
    "cel",
    "cel_grad_analytic",
    "evaluate_checkpoint",
    "evaluate_dataset",
    "evaluate_pairs",
    "extract",
    "load_checkpoint",
    "load_manifest",
    "load_pairs",
    "poly_lr",
    "save_checkpoint",
    "synth_generate",
    "total_loss",
    "train",
]
