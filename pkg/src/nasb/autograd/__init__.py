"""Reverse-mode automatic differentiation over dense numpy tensors."""

from .layers import BatchNorm2d, Conv2d, Linear, Module
from .ops import (
    ConvSpec,
    adapt_channels,
    add,
    avg_pool2d,
    batch_norm,
    conv2d,
    conv_out_extent,
    global_avg_pool,
    linear,
    max_pool2d,
    mean,
    mul,
    relu,
    reshape,
    softmax_cross_entropy,
    subsample,
    tanh,
)
from .optim import SGD, Adam, adam_step, sgd_momentum_step
from .tensor import ShapeError, Tensor, backward, parameter

__all__ = [
    "Adam",
    "BatchNorm2d",
    "Conv2d",
    "ConvSpec",
    "Linear",
    "Module",
    "SGD",
    "ShapeError",
    "Tensor",
    "adam_step",
    "adapt_channels",
    "add",
    "avg_pool2d",
    "backward",
    "batch_norm",
    "conv2d",
    "conv_out_extent",
    "global_avg_pool",
    "linear",
    "max_pool2d",
    "mean",
    "mul",
    "parameter",
    "relu",
    "reshape",
    "sgd_momentum_step",
    "softmax_cross_entropy",
    "subsample",
    "tanh",
]
