"""Learnable part of a DeepSITH network, with hand-written backpropagation."""

from .checkpoint import load_checkpoint, save_checkpoint
from .layers import BatchNorm, DeepSITHLayer, DenseLayer, layer_backward, layer_forward
from .losses import accuracy, loss_cross_entropy, loss_mse, metric_nrmse
from .network import (
    DeepSITHNet,
    LayerConfig,
    NetTrace,
    StaleTraceError,
    apply_update,
    build_network,
    count_parameters,
    net_backward,
    net_forward,
)
from .optim import AdamState, DivergenceError, adam_step

__all__ = [
    "AdamState",
    "BatchNorm",
    "DeepSITHLayer",
    "DeepSITHNet",
    "DenseLayer",
    "DivergenceError",
    "LayerConfig",
    "NetTrace",
    "StaleTraceError",
    "accuracy",
    "adam_step",
    "apply_update",
    "build_network",
    "count_parameters",
    "layer_backward",
    "layer_forward",
    "load_checkpoint",
    "loss_cross_entropy",
    "loss_mse",
    "metric_nrmse",
    "net_backward",
    "net_forward",
    "save_checkpoint",
]
