"""Parameter initialisation and the small building blocks shared by all stages.

Parameters live in a flat ``dict[str, Tensor]``; every block takes the dict
and a name prefix.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import Tensor, ops

Params = dict[str, Tensor]


def add_param(params: Params, name: str, value: np.ndarray) -> None:
    if name in params:
        raise KeyError(f"duplicate parameter {name!r}")
    params[name] = Tensor(value, requires_grad=True, name=name)


def init_linear(params: Params, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                zero: bool = False) -> None:
    bound = 0.0 if zero else math.sqrt(6.0 / (n_in + n_out))
    add_param(params, f"{name}.weight", rng.uniform(-bound, bound, (n_in, n_out)))
    add_param(params, f"{name}.bias", np.zeros(n_out))


def linear(x: Tensor, params: Params, name: str) -> Tensor:
    return ops.linear(x, params[f"{name}.weight"], params[f"{name}.bias"])


def init_layer_norm(params: Params, name: str, dim: int) -> None:
    add_param(params, f"{name}.weight", np.ones(dim))
    add_param(params, f"{name}.bias", np.zeros(dim))


def layer_norm(x: Tensor, params: Params, name: str, axis: int = -1) -> Tensor:
    w, b = params[f"{name}.weight"], params[f"{name}.bias"]
    if axis not in (-1, x.ndim - 1):
        shape = [1] * x.ndim
        shape[axis] = w.shape[0]
        w, b = ops.reshape(w, shape), ops.reshape(b, shape)
    return ops.layer_norm(x, w, b, axis=axis)


def init_conv(params: Params, name: str, c_in: int, c_out: int, kernel: int,
              rng: np.random.Generator, transposed: bool = False) -> None:
    fan_in = c_in * kernel**3
    std = math.sqrt(2.0 / fan_in)
    shape = (c_in, c_out) if transposed else (c_out, c_in)
    add_param(params, f"{name}.weight", rng.standard_normal(shape + (kernel,) * 3) * std)
    add_param(params, f"{name}.bias", np.zeros(c_out))


def init_mlp(params: Params, name: str, dims: list[int], rng: np.random.Generator,
             zero_last: bool = False) -> None:
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        init_linear(params, f"{name}.fc{i}", a, b, rng, zero=zero_last and i == len(dims) - 2)


def mlp(x: Tensor, params: Params, name: str, depth: int = 2) -> Tensor:
    for i in range(depth):
        x = linear(x, params, f"{name}.fc{i}")
        if i < depth - 1:
            x = ops.gelu(x)
    return x


def init_attention(params: Params, name: str, dim: int, rng: np.random.Generator,
                   zero_out: bool = False) -> None:
    for proj in ("q", "k", "v"):
        init_linear(params, f"{name}.{proj}", dim, dim, rng)
    init_linear(params, f"{name}.out", dim, dim, rng, zero=zero_out)


def attention(
    x: Tensor,
    params: Params,
    name: str,
    heads: int,
    memory: Tensor | None = None,
    weights_out: list | None = None,
) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``x`` [B, T, D] supplies the queries. Keys and values come from ``x``
    itself (self-attention) or from ``memory`` [M, D] / [B, M, D]
    (cross-attention). Attention maps [B, h, T, M] are appended to
    ``weights_out`` when given.
    """
    B, T, D = x.shape
    if D % heads:
        raise ValueError(f"embedding dim {D} not divisible by {heads} heads")
    if memory is not None and memory.shape[-1] != D:
        raise ValueError(f"memory dim {memory.shape[-1]} != token dim {D}")
    dh = D // heads
    src = x if memory is None else memory

    def split(t: Tensor) -> Tensor:
        if t.ndim == 2:
            return ops.transpose(ops.reshape(t, (t.shape[0], heads, dh)), (1, 0, 2))
        return ops.transpose(ops.reshape(t, (t.shape[0], t.shape[1], heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, params, f"{name}.q"))
    k = split(linear(src, params, f"{name}.k"))
    v = split(linear(src, params, f"{name}.v"))
    scores = ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    attn = ops.softmax(scores, axis=-1)
    if weights_out is not None:
        weights_out.append(attn.data)
    ctx = ops.matmul(attn, v)
    ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (B, T, D))
    return linear(ctx, params, f"{name}.out")


def init_transformer_block(params: Params, name: str, dim: int, mlp_ratio: int,
                           rng: np.random.Generator, zero_out: bool = False) -> None:
    init_layer_norm(params, f"{name}.ln1", dim)
    init_attention(params, f"{name}.attn", dim, rng, zero_out=zero_out)
    init_layer_norm(params, f"{name}.ln2", dim)
    init_mlp(params, f"{name}.mlp", [dim, mlp_ratio * dim, dim], rng, zero_last=zero_out)


def transformer_block(
    z: Tensor,
    params: Params,
    name: str,
    heads: int,
    memory: Tensor | None = None,
    weights_out: list | None = None,
) -> Tensor:
    """z' = Attn(LN(z)) + z;  z = MLP(LN(z')) + z'."""
    h = attention(layer_norm(z, params, f"{name}.ln1"), params, f"{name}.attn", heads,
                  memory=memory, weights_out=weights_out)
    z = z + h
    return z + mlp(layer_norm(z, params, f"{name}.ln2"), params, f"{name}.mlp")
