"""Minimal dense-tensor engine with reverse-mode differentiation."""

from . import ops
from .optim import SGD, global_grad_norm, sgd_step, warmup_cosine_lr
from .tensor import (
    Graph,
    ShapeError,
    Tensor,
    backward,
    check_finite,
    default_dtype,
    grad_enabled,
    no_grad,
    precision,
)

__all__ = [
    "Graph",
    "SGD",
    "ShapeError",
    "Tensor",
    "backward",
    "check_finite",
    "default_dtype",
    "global_grad_norm",
    "grad_enabled",
    "no_grad",
    "ops",
    "precision",
    "sgd_step",
    "warmup_cosine_lr",
]
