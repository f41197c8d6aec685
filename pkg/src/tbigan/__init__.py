"""Transformer-augmented BiGAN for unsupervised anomaly detection on PMU streams."""

from .data import PmuStream, PmuWindow, PreprocessStats, apply_preprocess, fit_preprocess, make_windows
from .detection import AnomalyScore, FeatureWeights, ThresholdState, fit_weights, score_stream, score_window
from .model import ModelConfig, TBiGAN
from .tensor import Tensor, backward
from .training import TrainConfig, train

__version__ = "0.1.0"
