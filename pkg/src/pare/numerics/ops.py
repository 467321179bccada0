"""Differentiable ops over :class:`Tensor`.

Every function returns a new tensor and records an adjoint when an input
requires a gradient. Elementwise binary ops broadcast numpy-style; their
adjoints are summed back to each operand's shape.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .tensor import ShapeError, Tensor, as_tensor, default_dtype, make_output

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return make_output(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_output(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_output("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_output("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_output("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_output("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_output("log", np.log(ad), (a,), lambda g: (g / ad,))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_SQRT_2_OVER_PI * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_output("gelu", out, (a,), bw)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const(b, a)
    b = as_tensor(b)
    return _const(a, b), b


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data, dtype=a.dtype)


# -- reductions / shape ----------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_output("sum", np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).astype(a.dtype),)

    return make_output("mean", np.asarray(out, dtype=a.dtype), (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return make_output("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_output("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    out = a.data[index]

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_output("getitem", np.array(out, dtype=a.dtype), (a,), bw)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return make_output("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def global_avg_pool(a: Tensor) -> Tensor:
    """[B, C, *spatial] -> [B, C]."""
    if a.ndim < 3:
        raise ShapeError(f"global_avg_pool: expected [B, C, *spatial], got {a.shape}")
    return mean(a, axis=tuple(range(2, a.ndim)))


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_output("matmul", out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[..., in] @ weight[in, out] + bias[out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, lead + (weight.shape[1],))


# -- normalisation ---------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_output("softmax", out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_output("log_softmax", out, (a,), bw)


def layer_norm(
    a: Tensor,
    weight: Tensor | None = None,
    bias: Tensor | None = None,
    axis: int = -1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalise over one axis, then optional affine.

    A constant slice normalises to exactly zero before the affine.
    """
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    flat = x.max(axis=axis, keepdims=True) == x.min(axis=axis, keepdims=True)
    if flat.any():
        xhat = np.where(flat, 0.0, xhat).astype(x.dtype)
    n = x.shape[axis]

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return ((inv * (g - gm - xhat * gxm)).astype(x.dtype),)

    out = make_output("layer_norm", xhat.astype(x.dtype, copy=False), (a,), bw)
    if n < 1:
        raise ShapeError("layer_norm: empty axis")
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# -- convolution -----------------------------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v  # type: ignore[return-value]


def _conv3d_shapes(x: Tensor, weight: Tensor, stride, padding):
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d: expected 5-d input and weight, got {x.shape} and {weight.shape}")
    B, C = x.shape[:2]
    O, Cw = weight.shape[:2]
    if C != Cw:
        raise ShapeError(f"conv3d: input {x.shape} has {C} channels, weight {weight.shape} expects {Cw}")
    k = weight.shape[2:]
    s = _triple(stride)
    p = _triple(padding)
    spatial = x.shape[2:]
    out_sz = tuple((spatial[i] + 2 * p[i] - k[i]) // s[i] + 1 for i in range(3))
    if any(n < 1 for n in out_sz):
        raise ShapeError(f"conv3d: kernel {k} larger than padded input {x.shape}")
    return B, C, O, k, s, p, spatial, out_sz


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Batched 3D cross-correlation.

    x [B, C, D, H, W], weight [O, C, kd, kh, kw], bias [O] -> [B, O, D', H', W']
    with D' = (D + 2p - kd) // s + 1 per axis. Zero padding. Runs compiled
    direct loops; anisotropic strides fall back to ``conv3d_reference``.
    """
    B, C, O, k, s, p, spatial, out_sz = _conv3d_shapes(x, weight, stride, padding)
    if len(set(s)) != 1:
        return conv3d_reference(x, weight, bias, stride, padding)
    step = s[0]
    pad = ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2]))
    xp = np.pad(x.data, pad) if any(p) else np.ascontiguousarray(x.data)
    w = np.ascontiguousarray(weight.data, dtype=x.dtype)
    out = np.empty((B, O) + out_sz, dtype=x.dtype)
    if step == 1:
        _kernels.conv3d_forward_s1(xp, w, out)
    else:
        _kernels.conv3d_forward(xp, w, out, step)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1, 1)

    def bw(g):
        g = np.ascontiguousarray(g, dtype=x.dtype)
        gx = gw = gbias = None
        gwide = _kernels.widen(g, xp.shape[4]) if step == 1 else None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            if step == 1:
                _kernels.conv3d_grad_input_s1(gwide, w, gxp, out_sz[1], out_sz[2])
            else:
                _kernels.conv3d_grad_input(g, w, gxp, step)
            gx = gxp[:, :, p[0]:p[0] + spatial[0], p[1]:p[1] + spatial[1], p[2]:p[2] + spatial[2]]
            gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            gw = np.empty_like(w)
            if step == 1:
                _kernels.conv3d_grad_weight_s1(gwide, xp, gw, out_sz[1], out_sz[2])
            else:
                _kernels.conv3d_grad_weight(g, xp, gw, step)
        if bias is not None and bias.requires_grad:
            gbias = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gbias

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("conv3d", out, inputs, bw)


def conv3d_reference(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """``conv3d`` as one [O, C] x [C, M] matrix product per kernel offset (pure numpy)."""
    B, C, O, k, s, p, spatial, out_sz = _conv3d_shapes(x, weight, stride, padding)
    # channel-major layout [C, B, ...]: each kernel offset is one [O, C] x [C, M] GEMM
    xcb = x.data.transpose(1, 0, 2, 3, 4)
    if any(p):
        xcb = np.pad(xcb, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))
    w = weight.data
    M = B * out_sz[0] * out_sz[1] * out_sz[2]
    offsets = [(i, j, l) for i in range(k[0]) for j in range(k[1]) for l in range(k[2])]

    def window(i, j, l):
        return (
            slice(None), slice(None),
            slice(i, i + s[0] * (out_sz[0] - 1) + 1, s[0]),
            slice(j, j + s[1] * (out_sz[1] - 1) + 1, s[1]),
            slice(l, l + s[2] * (out_sz[2] - 1) + 1, s[2]),
        )

    out = np.zeros((O, M), dtype=x.dtype)
    for i, j, l in offsets:
        out += w[:, :, i, j, l] @ xcb[window(i, j, l)].reshape(C, M)
    if bias is not None:
        out += bias.data.reshape(O, 1)
    result = np.ascontiguousarray(out.reshape((O, B) + out_sz).transpose(1, 0, 2, 3, 4))

    def bw(g):
        gflat = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(O, M)
        gx = gw = gbias = None
        if x.requires_grad:
            gxcb = np.zeros_like(xcb)
            for i, j, l in offsets:
                gxcb[window(i, j, l)] += (w[:, :, i, j, l].T @ gflat).reshape((C, B) + out_sz)
            gxcb = gxcb[:, :, p[0]:p[0] + spatial[0], p[1]:p[1] + spatial[1], p[2]:p[2] + spatial[2]]
            gx = np.ascontiguousarray(gxcb.transpose(1, 0, 2, 3, 4))
        if weight.requires_grad:
            gw = np.zeros_like(w)
            for i, j, l in offsets:
                gw[:, :, i, j, l] = gflat @ xcb[window(i, j, l)].reshape(C, M).T
        if bias is not None and bias.requires_grad:
            gbias = gflat.sum(axis=1)
        return gx, gw, gbias

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("conv3d", result, inputs, bw)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=2) -> Tensor:
    """Transposed 3D convolution without padding.

    x [B, C, D, H, W], weight [C, O, kd, kh, kw] -> [B, O, (D-1)s+kd, ...].
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(
            f"conv_transpose3d: expected 5-d input and weight, got {x.shape} and {weight.shape}"
        )
    B, C = x.shape[:2]
    Cw, O = weight.shape[:2]
    if C != Cw:
        raise ShapeError(
            f"conv_transpose3d: input {x.shape} has {C} channels, weight {weight.shape} expects {Cw}"
        )
    k = weight.shape[2:]
    s = _triple(stride)
    spatial = x.shape[2:]
    out_sz = tuple((spatial[i] - 1) * s[i] + k[i] for i in range(3))
    M = B * spatial[0] * spatial[1] * spatial[2]
    xflat = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3, 4)).reshape(C, M)
    w = weight.data
    out = np.zeros((O, B) + out_sz, dtype=x.dtype)
    offsets = [(i, j, l) for i in range(k[0]) for j in range(k[1]) for l in range(k[2])]

    def window(i, j, l):
        return (
            slice(None), slice(None),
            slice(i, i + s[0] * (spatial[0] - 1) + 1, s[0]),
            slice(j, j + s[1] * (spatial[1] - 1) + 1, s[1]),
            slice(l, l + s[2] * (spatial[2] - 1) + 1, s[2]),
        )

    for i, j, l in offsets:
        out[window(i, j, l)] += (w[:, :, i, j, l].T @ xflat).reshape((O, B) + spatial)
    if bias is not None:
        out += bias.data.reshape(O, 1, 1, 1, 1)
    result = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))

    def bw(g):
        gob = g.transpose(1, 0, 2, 3, 4)
        gx = gw = gbias = None
        gx_flat = np.zeros((C, M), dtype=g.dtype) if x.requires_grad else None
        if weight.requires_grad:
            gw = np.zeros_like(w)
        for i, j, l in offsets:
            gwin = gob[window(i, j, l)].reshape(O, M)
            if gx_flat is not None:
                gx_flat += w[:, :, i, j, l] @ gwin
            if gw is not None:
                gw[:, :, i, j, l] = xflat @ gwin.T
        if gx_flat is not None:
            gx = np.ascontiguousarray(gx_flat.reshape((C, B) + spatial).transpose(1, 0, 2, 3, 4))
        if bias is not None and bias.requires_grad:
            gbias = gob.sum(axis=(1, 2, 3, 4))
        return gx, gw, gbias

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("conv_transpose3d", result, inputs, bw)


def extract_windows(x: Tensor, window, stride) -> Tensor:
    """Overlapping patch extraction.

    x [B, C, D, H, W] -> [B, g, C*wd*wh*ww]; windows are ordered row-major
    over the (z, y, x) grid and each row flattens (C, wd, wh, ww).
    """
    if x.ndim != 5:
        raise ShapeError(f"extract_windows: expected [B, C, D, H, W], got {x.shape}")
    w = _triple(window)
    s = _triple(stride)
    B, C = x.shape[:2]
    grid = window_grid(x.shape[2:], w, s)
    view = sliding_window_view(x.data, w, axis=(2, 3, 4))[:, :, :: s[0], :: s[1], :: s[2]]
    # [B, C, gz, gy, gx, wz, wy, wx] -> [B, gz, gy, gx, C, wz, wy, wx]
    out = np.ascontiguousarray(view.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    g_total = grid[0] * grid[1] * grid[2]
    out = out.reshape(B, g_total, C * w[0] * w[1] * w[2])

    def bw(g):
        g = g.reshape(B, grid[0], grid[1], grid[2], C, w[0], w[1], w[2])
        gx = np.zeros(x.shape, dtype=g.dtype)
        for iz in range(grid[0]):
            for iy in range(grid[1]):
                for ix in range(grid[2]):
                    z0, y0, x0 = iz * s[0], iy * s[1], ix * s[2]
                    gx[:, :, z0:z0 + w[0], y0:y0 + w[1], x0:x0 + w[2]] += g[:, iz, iy, ix]
        return (gx,)

    return make_output("extract_windows", out, (x,), bw)


def window_grid(spatial: Sequence[int], window, stride) -> tuple[int, int, int]:
    """Number of windows per axis; raises naming the offending axis."""
    w = _triple(window)
    s = _triple(stride)
    grid = []
    for ax, (n, wi, si) in enumerate(zip(spatial, w, s)):
        if si > wi:
            raise ShapeError(f"axis {ax}: stride {si} exceeds window {wi}")
        if wi > n or (n - wi) % si:
            raise ShapeError(f"axis {ax}: size {n} - window {wi} not divisible by stride {si}")
        grid.append((n - wi) // si + 1)
    return tuple(grid)  # type: ignore[return-value]


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum(mul(a, b))

