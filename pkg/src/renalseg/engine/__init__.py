"""Dense-tensor engine: forward ops, reverse-mode gradients, Adam."""

from .gradcheck import GradCheckReport, grad_check
from .loss import LossConfig, compute_class_weights, weighted_cross_entropy
from .ops import (
    BatchNormState,
    batchnorm,
    concat_channels,
    conv1x1,
    conv3d,
    conv_transpose3d,
    dropout,
    maxpool3d,
    relu,
    softmax_channels,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Parameter, Tensor

__all__ = [
    "Adam",
    "AdamState",
    "BatchNormState",
    "GradCheckReport",
    "LossConfig",
    "Parameter",
    "Tensor",
    "adam_step",
    "batchnorm",
    "compute_class_weights",
    "concat_channels",
    "conv1x1",
    "conv3d",
    "conv_transpose3d",
    "dropout",
    "grad_check",
    "maxpool3d",
    "relu",
    "softmax_channels",
    "weighted_cross_entropy",
]
