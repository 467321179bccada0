"""Central finite-difference oracle, independent of the adjoint rules."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-3) -> np.ndarray:
    """d f() / d x by central differences, perturbing ``x.data`` in place."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * eps)
    return g


def directional_numeric(
    f: Callable[[], Tensor], xs: Sequence[Tensor], directions: Sequence[np.ndarray], eps: float = 1e-3
) -> float:
    """Finite-difference derivative of f along ``directions`` (one per tensor)."""
    originals = [x.data.copy() for x in xs]
    with no_grad():
        for x, d, o in zip(xs, directions, originals):
            x.data = (o + eps * d).astype(o.dtype)
        hi = float(f().data)
        for x, d, o in zip(xs, directions, originals):
            x.data = (o - eps * d).astype(o.dtype)
        lo = float(f().data)
    for x, o in zip(xs, originals):
        x.data = o
    return (hi - lo) / (2 * eps)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| scaled by the larger of the two gradients' max magnitudes."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def scalar_relative_error(a: float, n: float) -> float:
    scale = max(abs(a), abs(n))
    return 0.0 if scale == 0.0 else abs(a - n) / scale
