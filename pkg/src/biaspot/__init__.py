"""Bias-potential density estimation with random-feature models."""

__version__ = "0.1.0"

from .errors import DegenerateWeightsWarning, InvalidArgumentError, NumericError
from .measures import Grid, GridDensity, SampleSet, kl_divergence, log_partition
from .model import RELU, Activation, FeatureSet, Potential, TwoLayerNet, sample_features, smoothed_relu
from .objectives import Target
from .training import TrainConfig, train

__all__ = [
    "Activation", "DegenerateWeightsWarning", "FeatureSet", "Grid", "GridDensity",
    "InvalidArgumentError", "NumericError", "Potential", "RELU", "SampleSet", "Target",
    "TrainConfig", "TwoLayerNet", "kl_divergence", "log_partition", "sample_features",
    "smoothed_relu", "train",
]
