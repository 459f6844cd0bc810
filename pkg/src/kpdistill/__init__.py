"""Keypoint detector/descriptor training, distillation and evaluation."""

from .model import ModelConfig, ModelWeights, KeypointSet, forward, detect, sample_descriptors, param_count
from .metrics import f1, match_descriptors, precision, repeatability, evaluate_pair

__version__ = "0.1.0"
