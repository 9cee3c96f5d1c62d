"""Deep clustering with a convolutional denoising autoencoder and a
relative-entropy clustering head."""

from .autoencoder import ArchitectureSpec, DepictModel, arch_for_dataset, arch_for_shape
from .clustering import estimate_targets, kmeans, predict_soft_assignments
from .data import Dataset, load_dataset, synthetic_blobs
from .estimator import DEPICT
from .metrics import accuracy, nmi
from .nn import ConvSpec
from .trainer import TrainConfig, train_mda

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "ConvSpec",
    "DEPICT",
    "Dataset",
    "DepictModel",
    "TrainConfig",
    "accuracy",
    "arch_for_dataset",
    "arch_for_shape",
    "estimate_targets",
    "kmeans",
    "load_dataset",
    "nmi",
    "predict_soft_assignments",
    "synthetic_blobs",
    "train_mda",
]
