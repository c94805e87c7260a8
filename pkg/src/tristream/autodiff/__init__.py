"""Minimal float64 tensor library with reverse-mode differentiation."""
from .core import DimensionError, GradientTape, Tensor, UsageError, as_tensor, backward
from .nn import avg_pool2d, conv2d, max_pool2d
from .ops import (
    activation,
    add,
    concat,
    div,
    exp,
    l2_normalize,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    sigmoid_cross_entropy,
    softmax,
    softmax_cross_entropy,
    sqrt,
    square,
    stack,
    sub,
    take,
    tanh,
    transpose,
)
from .ops import sum as tsum
from .optim import Adam, OptimizerState, adaptive_step, uniform_init

__all__ = [
    "Adam", "DimensionError", "GradientTape", "OptimizerState", "Tensor", "UsageError",
    "activation", "adaptive_step", "add", "as_tensor", "avg_pool2d", "backward", "concat",
    "conv2d", "div", "exp", "l2_normalize", "linear", "log", "log_softmax", "matmul",
    "max_pool2d", "mean", "mul", "relu", "reshape", "sigmoid", "sigmoid_cross_entropy",
    "softmax", "softmax_cross_entropy", "sqrt", "square", "stack", "sub", "take", "tanh",
    "transpose", "tsum", "uniform_init",
]
