"""Minimal float64 tensor library with reverse-mode differentiation."""

from . import functional, kernels, nn
from .optim import Adam
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    current_tape,
    div,
    exp,
    finite_checks,
    getitem,
    grad_enabled,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reset_tape,
    reshape,
    sigmoid,
    sqrt,
    stack,
    sub,
    swapaxes,
    tanh,
    transpose,
    tsum,
    where,
)

__all__ = [
    "Adam",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "broadcast_to",
    "concat",
    "current_tape",
    "div",
    "exp",
    "finite_checks",
    "functional",
    "getitem",
    "grad_enabled",
    "kernels",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "nn",
    "no_grad",
    "power",
    "relu",
    "reset_tape",
    "reshape",
    "sigmoid",
    "sqrt",
    "stack",
    "sub",
    "swapaxes",
    "tanh",
    "transpose",
    "tsum",
    "where",
]
