"""Minimal numpy CNN engine with channel-level pruning masks."""
from .layers import DTYPE, Conv2D, Dense, Flatten, MaxPool2D, ReLU, ShapeError
from .model import (
    ARCHITECTURES,
    IDENTITY,
    ActivationRecord,
    BatchEvaluator,
    Model,
    NeuronId,
    PruneMask,
    apply_mask,
    argmax_labels,
    batch_activations,
    forward,
    forward_with_activations,
    mlp,
    predict,
    reference_cnn,
)
from .train import TrainingError, TrainParams, train

__all__ = [
    "DTYPE", "Conv2D", "Dense", "Flatten", "MaxPool2D", "ReLU", "ShapeError",
    "ARCHITECTURES", "IDENTITY", "ActivationRecord", "BatchEvaluator", "Model", "NeuronId", "PruneMask",
    "apply_mask", "argmax_labels", "batch_activations", "forward", "forward_with_activations",
    "mlp", "predict", "reference_cnn", "TrainingError", "TrainParams", "train",
]
