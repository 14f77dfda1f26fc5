"""Minimal tensor engine: reverse-mode autodiff, layers, optimizers, RNG streams."""

from .gradcheck import gradcheck, numerical_gradient, relative_error
from .nn import Dense, LayerNorm, Module, param
from .optim import (
    AdamState,
    LrSchedule,
    NonFiniteGradientError,
    adam_step,
    clip_grad_norm,
    global_norm,
    lr_at,
)
from .rng import rng_stream
from .tensor import (
    ACTIVATIONS,
    DimensionError,
    Tensor,
    concatenate,
    dense,
    exp,
    gelu,
    layer_norm,
    log,
    masked_fill,
    matmul,
    no_grad,
    relu,
    sigmoid,
    softmax,
    sqrt,
    square_sum,
    stack,
    tanh,
)

__all__ = [
    "ACTIVATIONS", "AdamState", "Dense", "DimensionError", "LayerNorm", "LrSchedule", "Module",
    "NonFiniteGradientError", "Tensor", "adam_step", "clip_grad_norm", "concatenate", "dense",
    "exp", "gelu", "global_norm", "gradcheck", "layer_norm", "log", "lr_at", "masked_fill",
    "matmul", "no_grad", "numerical_gradient", "param", "relative_error", "relu", "rng_stream",
    "sigmoid", "softmax", "sqrt", "square_sum", "stack", "tanh",
]
