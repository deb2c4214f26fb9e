"""Differentiable primitives over :class:`~lesa.tensor.Tensor`.

Every function takes tensors (or plain numbers / arrays, treated as
constants) and returns a fresh tensor; inputs are never mutated, except the
running statistics handed to :func:`batchnorm` in training mode.

Broadcasting is deliberately narrow: operands must either share a shape,
be scalars, or have the same rank with size-1 axes (e.g. a per-channel
``(1, C, 1, 1)`` vector).  Anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import _kernels
from .tensor import ShapeError, Tensor

__all__ = [
    "add",
    "sub",
    "mul",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "take",
    "relu",
    "sigmoid",
    "softmax_lastdim",
    "concat",
    "concat_channels",
    "conv2d",
    "batchnorm",
    "cross_entropy",
    "log_softmax",
]


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _elementwise_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if len(a) == 0 or int(np.prod(a)) == 1 and len(a) <= len(b):
        return b
    if len(b) == 0 or int(np.prod(b)) == 1 and len(b) <= len(a):
        return a
    if len(a) != len(b):
        raise ShapeError(f"{op}: shapes {a} and {b} differ in rank")
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: shapes {a} and {b} are not broadcast-compatible")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _elementwise_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _elementwise_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = _t(a), _t(b)
    _elementwise_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad * bd, (a, b), backward, "mul")


mul_elementwise = mul


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast as in numpy."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward, "matmul")


# -- reductions and shape ---------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _t(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else d for i, d in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), shape),)

    return Tensor._make(x.data.sum(axis=axes, keepdims=keepdims), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _t(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[i] for i in axes]))
    shape = x.shape
    kept = tuple(1 if i in axes else d for i, d in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept) / count, shape),)

    return Tensor._make(x.data.mean(axis=axes, keepdims=keepdims), (x,), backward, "mean")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _t(x)
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(src),)

    return Tensor._make(out, (x,), backward, "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _t(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return Tensor._make(np.transpose(x.data, axes), (x,), backward, "transpose")


def take(table, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather ``table`` along ``axis`` with an integer index array (any shape)."""
    table = _t(table)
    index = np.asarray(index, dtype=np.intp)
    axis = axis % table.ndim
    lead = (slice(None),) * axis

    def backward(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, lead + (index,), g)
        return (gt,)

    return Tensor._make(table.data[lead + (index,)], (table,), backward, "take")


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [_t(t) for t in tensors]
    ref = ts[0].shape
    axis = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat along axis {axis}: shapes {[t.shape for t in ts]} disagree")
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def concat_channels(a, b) -> Tensor:
    """Stack along the channel axis: axis 0 for ``C×H×W``, axis 1 for ``B×C×H×W``."""
    a = _t(a)
    return concat([a, b], axis=0 if a.ndim == 3 else 1)


# -- nonlinearities ------------------------------------------------------------------


def relu(x) -> Tensor:
    x = _t(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._make(x.data * mask, (x,), backward, "relu")


_SIG_HI = np.nextafter(1.0, 0.0)
_SIG_LO = np.finfo(np.float64).tiny


def sigmoid(x) -> Tensor:
    """Logistic function, clamped so the result stays strictly inside (0, 1)."""
    x = _t(x)
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    s = np.clip(s, _SIG_LO, _SIG_HI)

    def backward(g):
        return (g * s * (1.0 - s),)

    return Tensor._make(s, (x,), backward, "sigmoid")


def softmax_lastdim(z, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (boolean, broadcastable to ``z``) selects the entries that take
    part; excluded entries get weight exactly 0.  Every slice must keep at
    least one entry.
    """
    z = _t(z)
    zd = z.data
    if mask is None:
        shifted = zd - zd.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), zd.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax mask leaves an empty slice")
        zmax = np.where(mask, zd, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, zd - zmax, 0.0)), 0.0)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._make(s, (z,), backward, "softmax")


def log_softmax(z) -> Tensor:
    z = _t(z)
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(out, (z,), backward, "log_softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    logits = _t(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects B×K logits, got {logits.shape}")
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): min={labels.min()}, max={labels.max()}")
    labels = labels.astype(np.intp)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(b)
    loss = np.mean(lse - shifted[rows, labels])

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return Tensor._make(np.asarray(loss), (logits,), backward, "cross_entropy")


# -- convolution -----------------------------------------------------------------------


def conv2d(x, kernel, groups: int = 1, stride: int = 1, padding: int | str = 0) -> Tensor:
    """Grouped 2D cross-correlation without bias.

    ``x`` is ``B×C_in×H×W`` (or ``C_in×H×W``), ``kernel`` is
    ``C_out×(C_in/groups)×k×k``.  ``padding="same"`` means ``(k-1)/2`` and
    requires an odd ``k``.
    """
    x, kernel = _t(x), _t(kernel)
    squeeze = x.ndim == 3
    xd = np.ascontiguousarray(x.data[None] if squeeze else x.data)
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects B×C×H×W input and 4D kernel, got {x.shape} and {kernel.shape}")
    bsz, cin, h, w = xd.shape
    cout, cin_g, k, k2 = kernel.shape
    if k != k2:
        raise ShapeError(f"conv2d supports square kernels only, got {k}×{k2}")
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"conv2d: groups={groups} must divide C_in={cin} and C_out={cout}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"conv2d: kernel expects {cin_g} channels per group but input has {cin}/{groups}"
        )
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"'same' padding needs an odd kernel size, got k={k}")
        padding = (k - 1) // 2
    p, s = int(padding), int(stride)
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, k={k}, stride={s}, padding={p}")
    g = groups
    cout_g = cout // g
    kk = cin_g * k * k
    npos = ho * wo

    if k == 1 and p == 0:
        src = xd[:, :, ::s, ::s] if s > 1 else xd
        cols = np.ascontiguousarray(src).reshape(bsz, g, kk, npos)
    else:
        cols = _kernels.im2col(xd, k, s, p, ho, wo).reshape(bsz, g, kk, npos)
    wmat = kernel.data.reshape(g, cout_g, kk)
    # Small grids: fold the batch into the GEMM columns (one big product per
    # group) instead of B tiny products.
    wide = npos < 64
    if wide:
        cols = np.ascontiguousarray(cols.transpose(1, 2, 0, 3)).reshape(g, kk, bsz * npos)
        out = (wmat @ cols).reshape(g, cout_g, bsz, npos).transpose(2, 0, 1, 3)
        out = np.ascontiguousarray(out).reshape(bsz, cout, ho, wo)
    else:
        out = np.matmul(wmat, cols).reshape(bsz, cout, ho, wo)
    if squeeze:
        out = out[0]

    def backward(grad):
        gm = (grad[None] if squeeze else grad).reshape(bsz, g, cout_g, npos)
        if wide:
            gm = np.ascontiguousarray(gm.transpose(1, 2, 0, 3)).reshape(g, cout_g, bsz * npos)
        gk = gx = None
        if kernel.requires_grad:
            if wide:
                gk = gm @ cols.transpose(0, 2, 1)
            else:
                gk = np.matmul(gm, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            gk = gk.reshape(kernel.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.transpose(0, 2, 1), gm)
            if wide:
                gcols = np.ascontiguousarray(gcols.reshape(g, kk, bsz, npos).transpose(2, 0, 1, 3))
            if k == 1 and p == 0:
                gc = gcols.reshape(bsz, cin, ho, wo)
                if s == 1:
                    gx = gc
                else:
                    gx = np.zeros(xd.shape)
                    gx[:, :, ::s, ::s] = gc
            else:
                gx = _kernels.col2im(gcols.reshape(bsz, cin * k * k, npos), cin, h, w, k, s, p, ho, wo)
            if squeeze:
                gx = gx[0]
        return gx, gk

    return Tensor._make(out, (x, kernel), backward, "conv2d")


# -- batch normalization -------------------------------------------------------------------


def batchnorm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of ``B×C×...`` input.

    In training mode the statistics are taken over every axis except 1 and
    the running buffers (if given) are updated in place with
    ``r <- (1 - momentum) * r + momentum * batch_stat``.  The biased batch
    variance is used both for normalizing and for the running estimate.
    """
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    if eps <= 0:
        raise ValueError("batchnorm eps must be positive")
    if x.ndim < 2:
        raise ShapeError(f"batchnorm expects B×C×... input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match C={c}")
    b = x.shape[0]
    x3 = np.ascontiguousarray(x.data).reshape(b, c, -1)
    gam = np.ascontiguousarray(gamma.data)
    bet = np.ascontiguousarray(beta.data)
    shape = x.shape

    if training:
        out, mu, var, inv = _kernels.bn_train_forward(x3, gam, bet, float(eps))
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var

        def backward(g):
            g3 = np.ascontiguousarray(g).reshape(x3.shape)
            dx, dgamma, dbeta = _kernels.bn_train_backward(x3, g3, mu, inv, gam)
            return dx.reshape(shape), dgamma, dbeta

    else:
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm in eval mode needs running statistics")
        mu = np.array(running_mean, dtype=np.float64)
        inv = 1.0 / np.sqrt(np.asarray(running_var, dtype=np.float64) + eps)
        out = _kernels.bn_affine(x3, mu, inv, gam, bet)

        def backward(g):
            g3 = np.ascontiguousarray(g).reshape(x3.shape)
            dbeta, dgamma = _kernels.bn_grad_sums(x3, g3, mu, inv)
            dx = g3 * (gam * inv)[None, :, None]
            return dx.reshape(shape), dgamma, dbeta

    out = out.reshape(shape)
    return Tensor._make(out, (x, gamma, beta), backward, "batchnorm")
