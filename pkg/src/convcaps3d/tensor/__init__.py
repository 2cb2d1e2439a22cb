"""Differentiable dense tensors: core graph, ops, 3D convolution, grad checks."""

from .core import (
    DEFAULT_DTYPE,
    NonFiniteError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    finite_checks,
    is_grad_enabled,
    make_result,
    no_grad,
)
from .conv import ConvSpec, conv3d, upsample3d
from .gradcheck import grad_check
from .ops import (
    add,
    clamp_min,
    concat,
    div,
    exp,
    log,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    softmax,
    square,
    sub,
    sum,
    transpose,
    unbroadcast,
    vector_norm,
)

__all__ = [
    "DEFAULT_DTYPE",
    "ConvSpec",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "clamp_min",
    "concat",
    "conv3d",
    "div",
    "exp",
    "finite_checks",
    "grad_check",
    "is_grad_enabled",
    "log",
    "make_result",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "power",
    "relu",
    "reshape",
    "softmax",
    "square",
    "sub",
    "sum",
    "transpose",
    "unbroadcast",
    "upsample3d",
    "vector_norm",
]
