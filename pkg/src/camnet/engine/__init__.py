"""Numpy tensor engine with reverse-mode differentiation."""

from .autodiff import (Tape, Tensor, add, backward, clip, concat, div, exp, getitem, log, matmul,
                       mean, mul, neg, no_grad, reshape, scalar_mul, sqrt, square, stack, sub,
                       sum_, transpose)
from .functional import (activation, batch_norm, bilinear_sample, conv2d, coordinate_grid,
                         l2_normalize, leaky_relu, pixel_centers, relu, sigmoid, softmax,
                         upsample_linear)
from .layers import BatchNorm2d, Conv2d, Module, frozen, stats_frozen
from .optim import Adam

__all__ = [
    "Tape", "Tensor", "add", "backward", "clip", "concat", "div", "exp", "getitem", "log",
    "matmul", "mean", "mul", "neg", "no_grad", "reshape", "scalar_mul", "sqrt", "square",
    "stack", "sub", "sum_", "transpose", "activation", "batch_norm", "bilinear_sample",
    "conv2d", "coordinate_grid", "l2_normalize", "leaky_relu", "pixel_centers", "relu",
    "sigmoid", "softmax", "upsample_linear", "BatchNorm2d", "Conv2d", "Module", "frozen",
    "stats_frozen", "Adam",
]
