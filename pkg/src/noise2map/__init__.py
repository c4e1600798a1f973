"""Discriminative diffusion for segmentation and change detection."""

from .data import DatasetManifest, Sample, SynthSpec, generate_synthetic, load_manifest
from .estimator import DiffusionSegmenter
from .evaluation import ConfusionMatrix, RankTable, metrics, rank_aggregate
from .inference import predict, timestep_sweep
from .model import DenoiserModel, UNetConfig, build_model, count_parameters
from .objectives import ClassWeights, MultiTaskWeights, multitask_loss, weighted_cross_entropy
from .schedule import ScheduleConfig, forward_sample, make_alpha_bar_curve
from .training import Checkpoint, TrainConfig, pretrain, train_multitask, train_task

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ClassWeights", "ConfusionMatrix", "DatasetManifest", "DenoiserModel", "DiffusionSegmenter",
    "MultiTaskWeights", "RankTable", "Sample", "ScheduleConfig", "SynthSpec", "TrainConfig", "UNetConfig",
    "build_model", "count_parameters", "forward_sample", "generate_synthetic", "load_manifest",
    "make_alpha_bar_curve", "metrics", "multitask_loss", "predict", "pretrain", "rank_aggregate",
    "timestep_sweep", "train_multitask", "train_task", "weighted_cross_entropy",
]
