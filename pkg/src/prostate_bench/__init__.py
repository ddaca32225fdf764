"""2D U-Net prostate MR segmentation benchmark: volume parsers, preprocessing,
augmentation, Mish U-Net, Ranger optimiser, composite loss, cross-dataset
evaluation protocol and a synthetic stand-in benchmark."""
from .augment import AugmentPolicy, augment_sample
from .config import ConfigError, TrainConfig
from .estimator import UNetSegmenter
from .losses import CombinedLoss, LossWeights, combined_loss, dsc
from .model import ModelCheckpoint, ModelSpec, UNet, mish, mish_grad, predict_mask
from .optim import RAdam, Ranger, ScheduleSpec, flat_cos_lr
from .preprocess import (
    SlicePreprocessor,
    SliceSample,
    adaptive_hist_eq,
    volume_to_samples,
)
from .protocol import (
    EvalMatrix,
    SplitSpec,
    build_matrix,
    evaluate_model,
    make_split,
    train_model,
)
from .synthetic import generate_benchmark, generate_dataset
from .volume_io import DatasetId, DatasetManifest, MaskVolume, Volume, build_manifest

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy",
    "CombinedLoss",
    "ConfigError",
    "DatasetId",
    "DatasetManifest",
    "EvalMatrix",
    "LossWeights",
    "MaskVolume",
    "ModelCheckpoint",
    "ModelSpec",
    "RAdam",
    "Ranger",
    "ScheduleSpec",
    "SlicePreprocessor",
    "SliceSample",
    "SplitSpec",
    "TrainConfig",
    "UNet",
    "UNetSegmenter",
    "Volume",
    "adaptive_hist_eq",
    "augment_sample",
    "build_manifest",
    "build_matrix",
    "combined_loss",
    "dsc",
    "evaluate_model",
    "flat_cos_lr",
    "generate_benchmark",
    "generate_dataset",
    "make_split",
    "mish",
    "mish_grad",
    "predict_mask",
    "train_model",
    "volume_to_samples",
]
