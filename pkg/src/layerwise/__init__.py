"""Greedy layerwise training of convolutional networks with shallow auxiliary classifiers."""

from ._backend import BACKEND
from .architecture import build_network, invertible_downsample, invertible_upsample
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, TrainConfig, from_preset, load_config
from .data import LabeledDataset, load_cifar10, load_mnist
from .trainer import GreedyNet, ensemble_predict, evaluate, train_greedy

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "GreedyNet", "LabeledDataset", "PRESETS", "TrainConfig", "build_network", "ensemble_predict",
    "evaluate", "from_preset", "invertible_downsample", "invertible_upsample", "load_checkpoint", "load_cifar10",
    "load_config", "load_mnist", "save_checkpoint", "train_greedy",
]
