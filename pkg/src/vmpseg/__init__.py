"""Variational moment propagation for encoder-decoder segmentation networks.

A forward pass carries the mean and diagonal variance of every activation
through the network, so one pass yields both a segmentation map and a
per-pixel uncertainty map.
"""

from .datagen import Dataset, LabeledSample, ShapeTaskConfig, generate, load_dataset, save_dataset
from .checkpoint import load_model, save_model
from .elbo import LossConfig
from .moments import PriorSpec, RandomTensor, VariationalKernel, make_rng
from .training import TrainConfig, train
from .unet import NetworkConfig, SegmentationOutput, build, deterministic_forward, forward, predict

__version__ = "0.1.0"

__all__ = [
    "Dataset", "LabeledSample", "ShapeTaskConfig", "generate", "load_dataset", "save_dataset",
    "load_model", "save_model", "LossConfig", "PriorSpec", "RandomTensor", "VariationalKernel",
    "make_rng", "TrainConfig", "train", "NetworkConfig", "SegmentationOutput", "build",
    "deterministic_forward", "forward", "predict",
]
