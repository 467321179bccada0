"""Compiled direct-convolution loops (forward, input gradient, weight gradient).

Inputs are pre-padded, so every kernel only handles the stride. The
innermost loop always runs along the contiguous x axis.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def conv3d_forward(xp, w, out, s):
    B, C = xp.shape[0], xp.shape[1]
    O, k0, k1, k2 = w.shape[0], w.shape[2], w.shape[3], w.shape[4]
    Z, Y, X = out.shape[2], out.shape[3], out.shape[4]
    acc = np.empty(X, dtype=out.dtype)
    for b in range(B):
        for o in range(O):
            for z in range(Z):
                for y in range(Y):
                    acc[:] = 0
                    for c in range(C):
                        for dz in range(k0):
                            for dy in range(k1):
                                row = xp[b, c, z * s + dz, y * s + dy]
                                for dx in range(k2):
                                    wv = w[o, c, dz, dy, dx]
                                    for x in range(X):
                                        acc[x] += wv * row[x * s + dx]
                    out[b, o, z, y, :] = acc


@njit(cache=True, fastmath=True)
def conv3d_grad_input(g, w, gxp, s):
    B, O, Z, Y, X = g.shape
    C, k0, k1, k2 = w.shape[1], w.shape[2], w.shape[3], w.shape[4]
    for b in range(B):
        for c in range(C):
            for z in range(Z):
                for y in range(Y):
                    for o in range(O):
                        grow = g[b, o, z, y]
                        for dz in range(k0):
                            for dy in range(k1):
                                target = gxp[b, c, z * s + dz, y * s + dy]
                                for dx in range(k2):
                                    wv = w[o, c, dz, dy, dx]
                                    for x in range(X):
                                        target[x * s + dx] += wv * grow[x]


@njit(cache=True, fastmath=True)
def conv3d_grad_weight(g, xp, gw, s):
    B, O, Z, Y, X = g.shape
    C, k0, k1, k2 = gw.shape[1], gw.shape[2], gw.shape[3], gw.shape[4]
    for o in range(O):
        for c in range(C):
            for dz in range(k0):
                for dy in range(k1):
                    for dx in range(k2):
                        acc = 0.0
                        for b in range(B):
                            for z in range(Z):
                                for y in range(Y):
                                    grow = g[b, o, z, y]
                                    xrow = xp[b, c, z * s + dz, y * s + dy]
                                    for x in range(X):
                                        acc += grow[x] * xrow[x * s + dx]
                        gw[o, c, dz, dy, dx] = acc


# Stride-1 variants work on whole (y, x) planes flattened with the padded row
# width Xp: output (y, x) sits at y*Xp + x and reads input y*Xp + x + dy*Xp + dx,
# so every kernel offset is one long contiguous multiply-add. The Xp - X spare
# columns of each output row are scratch (forward) or zero (gradients).


@njit(cache=True, fastmath=True)
def conv3d_forward_s1(xp, w, out):
    B, C, Zp, Yp, Xp = xp.shape
    O, k0, k1, k2 = w.shape[0], w.shape[2], w.shape[3], w.shape[4]
    Z, Y, X = out.shape[2], out.shape[3], out.shape[4]
    L = (Y - 1) * Xp + X
    acc = np.empty(L, dtype=out.dtype)
    for b in range(B):
        for o in range(O):
            for z in range(Z):
                acc[:] = 0
                for c in range(C):
                    for dz in range(k0):
                        plane = xp[b, c, z + dz].reshape(Yp * Xp)
                        for dy in range(k1):
                            for dx in range(k2):
                                wv = w[o, c, dz, dy, dx]
                                off = dy * Xp + dx
                                src = plane[off:off + L]
                                for n in range(L):
                                    acc[n] += wv * src[n]
                for y in range(Y):
                    for x in range(X):
                        out[b, o, z, y, x] = acc[y * Xp + x]


@njit(cache=True)
def widen(g, Xp):
    """[B, O, Z, Y, X] -> [B, O, Z, Y*Xp] with zeroed spare columns."""
    B, O, Z, Y, X = g.shape
    wide = np.zeros((B, O, Z, Y * Xp), dtype=g.dtype)
    for b in range(B):
        for o in range(O):
            for z in range(Z):
                for y in range(Y):
                    for x in range(X):
                        wide[b, o, z, y * Xp + x] = g[b, o, z, y, x]
    return wide


@njit(cache=True, fastmath=True)
def conv3d_grad_input_s1(gwide, w, gxp, Y, X):
    B, O, Z = gwide.shape[0], gwide.shape[1], gwide.shape[2]
    C, k0, k1, k2 = w.shape[1], w.shape[2], w.shape[3], w.shape[4]
    Yp, Xp = gxp.shape[3], gxp.shape[4]
    L = (Y - 1) * Xp + X
    for b in range(B):
        for c in range(C):
            for z in range(Z):
                for dz in range(k0):
                    target = gxp[b, c, z + dz].reshape(Yp * Xp)
                    for o in range(O):
                        src = gwide[b, o, z]
                        for dy in range(k1):
                            for dx in range(k2):
                                wv = w[o, c, dz, dy, dx]
                                off = dy * Xp + dx
                                dst = target[off:off + L]
                                for n in range(L):
                                    dst[n] += wv * src[n]


@njit(cache=True, fastmath=True)
def conv3d_grad_weight_s1(gwide, xp, gw, Y, X):
    B, O, Z = gwide.shape[0], gwide.shape[1], gwide.shape[2]
    C, k0, k1, k2 = gw.shape[1], gw.shape[2], gw.shape[3], gw.shape[4]
    Yp, Xp = xp.shape[3], xp.shape[4]
    L = (Y - 1) * Xp + X
    # a vector accumulator keeps the inner loop free of a reduction dependency
    acc = np.empty(L, dtype=gw.dtype)
    for o in range(O):
        for c in range(C):
            for dz in range(k0):
                for dy in range(k1):
                    for dx in range(k2):
                        off = dy * Xp + dx
                        acc[:] = 0
                        for b in range(B):
                            for z in range(Z):
                                src = gwide[b, o, z]
                                plane = xp[b, c, z + dz].reshape(Yp * Xp)[off:off + L]
                                for n in range(L):
                                    acc[n] += src[n] * plane[n]
                        gw[o, c, dz, dy, dx] = acc.sum()
