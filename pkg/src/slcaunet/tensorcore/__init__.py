"""Numpy-backed tensors with reverse-mode differentiation."""
from .conv import ConvParams, conv, conv_output_shape, init_dense, resample, same_margin
from .gradcheck import GradCheckError, GradCheckResult, grad_check, relative_error
from .ops import (
    add,
    clamp_min,
    concat_channels,
    dense,
    div,
    eltwise_add,
    exp,
    global_avg_pool,
    index,
    log,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
)
from .ops import sum as reduce_sum
from .tensor import (
    GradTape,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    checked,
    is_grad_enabled,
    no_grad,
)

__all__ = [
    "ConvParams", "GradCheckError", "GradCheckResult", "GradTape", "NonFiniteError", "ShapeError", "Tensor",
    "add", "as_tensor", "backward", "checked", "clamp_min", "concat_channels", "conv", "conv_output_shape",
    "dense", "div", "eltwise_add", "exp", "global_avg_pool", "grad_check", "index", "init_dense",
    "is_grad_enabled", "log", "mean", "mul", "neg", "no_grad", "reduce_sum", "relative_error", "relu",
    "resample", "reshape", "same_margin", "sigmoid", "softmax", "sub",
]
