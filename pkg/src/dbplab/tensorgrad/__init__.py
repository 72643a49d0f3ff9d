"""Minimal reverse-mode autodiff over numpy arrays."""
from .checkpoint import checkpoint_segment
from .core import (
    GraphStats,
    Node,
    Tensor,
    add,
    backward,
    clamp,
    default_dtype,
    div,
    elementwise,
    enable_grad,
    exp,
    get_default_dtype,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    set_default_dtype,
    softmax_cross_entropy,
    sqrt,
    sub,
    tanh,
    tensor,
    track_graph,
    tsum,
)
from . import dbpt

__all__ = [
    "GraphStats", "Node", "Tensor", "add", "backward", "checkpoint_segment", "clamp",
    "dbpt", "default_dtype", "div", "elementwise", "enable_grad", "exp",
    "get_default_dtype", "log", "matmul", "mean", "mul", "neg", "no_grad", "relu",
    "reshape", "set_default_dtype", "softmax_cross_entropy", "sqrt", "sub", "tanh",
    "tensor", "track_graph", "tsum",
]
