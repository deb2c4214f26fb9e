"""Compiled loops for the memory-bound hot paths (batchnorm, im2col, col2im).

All kernels are single-threaded and run in a fixed order, so results are
bitwise reproducible.
"""

from __future__ import annotations

import numba
import numpy as np

_jit = numba.njit(cache=True, fastmath=False, nogil=True)


@_jit
def bn_train_forward(x, gamma, beta, eps):
    """x: (B, C, L).  Returns (out, mean, biased var, 1/sqrt(var + eps))."""
    nb, nc, nl = x.shape
    n = nb * nl
    mu = np.zeros(nc)
    var = np.zeros(nc)
    for b in range(nb):
        for c in range(nc):
            s = 0.0
            for i in range(nl):
                s += x[b, c, i]
            mu[c] += s
    mu /= n
    for b in range(nb):
        for c in range(nc):
            m = mu[c]
            s = 0.0
            for i in range(nl):
                d = x[b, c, i] - m
                s += d * d
            var[c] += s
    var /= n
    inv = 1.0 / np.sqrt(var + eps)
    out = np.empty_like(x)
    for b in range(nb):
        for c in range(nc):
            a = inv[c] * gamma[c]
            m = mu[c]
            o = beta[c]
            for i in range(nl):
                out[b, c, i] = (x[b, c, i] - m) * a + o
    return out, mu, var, inv


@_jit
def bn_affine(x, mu, inv, gamma, beta):
    """``(x - mu) * inv * gamma + beta`` per channel of (B, C, L)."""
    nb, nc, nl = x.shape
    out = np.empty_like(x)
    for b in range(nb):
        for c in range(nc):
            a = inv[c] * gamma[c]
            m = mu[c]
            o = beta[c]
            for i in range(nl):
                out[b, c, i] = (x[b, c, i] - m) * a + o
    return out


@_jit
def bn_grad_sums(x, g, mu, inv):
    """Per-channel ``sum(g)`` and ``sum(g * xhat)``."""
    nb, nc, nl = x.shape
    gb = np.zeros(nc)
    gg = np.zeros(nc)
    for b in range(nb):
        for c in range(nc):
            m = mu[c]
            iv = inv[c]
            s1 = 0.0
            s2 = 0.0
            for i in range(nl):
                gv = g[b, c, i]
                s1 += gv
                s2 += gv * (x[b, c, i] - m) * iv
            gb[c] += s1
            gg[c] += s2
    return gb, gg


@_jit
def bn_train_backward(x, g, mu, inv, gamma):
    """Returns (dx, dgamma, dbeta) for training-mode batchnorm."""
    nb, nc, nl = x.shape
    n = nb * nl
    gb, gg = bn_grad_sums(x, g, mu, inv)
    dx = np.empty_like(x)
    for b in range(nb):
        for c in range(nc):
            a = gamma[c] * inv[c]
            k1 = gb[c] / n
            k2 = gg[c] / n
            m = mu[c]
            iv = inv[c]
            for i in range(nl):
                dx[b, c, i] = a * (g[b, c, i] - k1 - (x[b, c, i] - m) * iv * k2)
    return dx, gg, gb


@_jit
def im2col(x, k, stride, pad, ho, wo):
    """(B, C, H, W) -> (B, C*k*k, ho*wo); rows ordered (c, di, dj)."""
    nb, nc, h, w = x.shape
    cols = np.zeros((nb, nc * k * k, ho * wo))
    for b in range(nb):
        for c in range(nc):
            for di in range(k):
                for dj in range(k):
                    r = (c * k + di) * k + dj
                    for oi in range(ho):
                        ii = oi * stride + di - pad
                        if ii < 0 or ii >= h:
                            continue
                        base = oi * wo
                        for oj in range(wo):
                            jj = oj * stride + dj - pad
                            if 0 <= jj < w:
                                cols[b, r, base + oj] = x[b, c, ii, jj]
    return cols


@_jit
def col2im(cols, nc, h, w, k, stride, pad, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add (B, C*k*k, ho*wo) back to (B, C, H, W)."""
    nb = cols.shape[0]
    x = np.zeros((nb, nc, h, w))
    for b in range(nb):
        for c in range(nc):
            for di in range(k):
                for dj in range(k):
                    r = (c * k + di) * k + dj
                    for oi in range(ho):
                        ii = oi * stride + di - pad
                        if ii < 0 or ii >= h:
                            continue
                        base = oi * wo
                        for oj in range(wo):
                            jj = oj * stride + dj - pad
                            if 0 <= jj < w:
                                x[b, c, ii, jj] += cols[b, r, base + oj]
    return x
