"""SGD with heavy-ball momentum and the warmup+cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .tensor import Tensor


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float,
    velocity: dict[str, np.ndarray] | None = None,
    strict: bool = False,
) -> dict[str, np.ndarray]:
    """In-place update ``v <- momentum * v + g``; ``p <- p - lr * v``.

    ``velocity`` is mutated and returned. With ``strict`` every trainable
    parameter must have a gradient.
    """
    missing = set(grads) - set(params)
    if missing:
        raise KeyError(f"gradients for unknown parameters: {sorted(missing)}")
    if strict:
        absent = [k for k, p in params.items() if p.requires_grad and k not in grads]
        if absent:
            raise KeyError(f"missing gradient for trainable parameters: {absent}")
    velocity = {} if velocity is None else velocity
    for name, g in grads.items():
        p = params[name]
        v = velocity.get(name)
        v = g.astype(p.dtype, copy=True) if v is None else momentum * v + g
        velocity[name] = v.astype(p.dtype, copy=False)
        p.data = (p.data - lr * velocity[name]).astype(p.dtype, copy=False)
    return velocity


class SGD:
    def __init__(self, params: Mapping[str, Tensor], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, grads: Mapping[str, np.ndarray], lr: float, strict: bool = False) -> None:
        sgd_step(self.params, grads, lr, self.momentum, self.velocity, strict=strict)


def warmup_cosine_lr(iteration: int, total_iters: int, base_lr: float, warmup_frac: float = 0.05) -> float:
    """Linear warmup over the first ``warmup_frac`` of iterations, then cosine decay to 0.

    ``iteration`` is 0-based.
    """
    warmup = max(1, int(round(warmup_frac * total_iters)))
    if iteration < warmup:
        return base_lr * (iteration + 1) / warmup
    span = max(1, total_iters - warmup)
    progress = min(1.0, (iteration - warmup) / span)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
