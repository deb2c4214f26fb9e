"""All-to-all 2D self-attention with relative position logits.

For each head the output at location ``(i, j)`` is

    out[i, j] = sum_{h, w} S[(i, j), (h, w)] * v[h, w]
    S[(i, j), :] = softmax_{(h, w)}( q[i, j] . k[h, w] + q[i, j] . r[(i, j) -> (h, w)] )

with ``r[(i, j) -> (h, w)] = r_row[i - h] + r_col[j - w]``.  The sum splits
exactly into the *unary* term (``(h, w) == (i, j)``) and the *binary* term
(everything else); :func:`decompose_attention` returns both parts.

Public functions accept ``C×H×W`` or ``B×C×H×W`` input and answer in kind.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .nn import Module
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "AttentionConfig",
    "AttentionLayer",
    "DecompositionStats",
    "qkv_project",
    "relative_logits",
    "attention_logits",
    "attention_weights",
    "attention_forward",
    "decompose_attention",
    "ablate_unary",
]


@dataclass(frozen=True)
class AttentionConfig:
    d_in: int
    d_qk: int
    d_out: int
    H: int
    W: int
    heads: int = 8
    use_position: bool = True
    scale_logits: bool = False

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError(f"heads must be positive, got {self.heads}")
        for name in ("d_qk", "d_out"):
            if getattr(self, name) % self.heads:
                raise ValueError(f"{name}={getattr(self, name)} is not divisible by heads={self.heads}")
        if min(self.d_in, self.d_qk, self.d_out, self.H, self.W) < 1:
            raise ValueError("channel counts and grid sizes must be positive")


@dataclass(frozen=True)
class DecompositionStats:
    """Softmax weight of the unary term, averaged over batch, heads and locations."""

    unary_weight: float
    binary_weight: float
    layer_id: str = ""
    total: float = 0.0  # sum of diagonal softmax weights (for streaming merges)
    count: int = 0


class AttentionLayer(Module):
    """Parameters ``w_q``, ``w_k`` (d_in×d_qk), ``w_v`` (d_in×d_out), ``r_row``, ``r_col``.

    ``ablation`` switches the forward pass between the full sum (``None``),
    the sum without the unary term keeping the softmax denominator
    (``"drop"``), and a re-normalized softmax over the other locations
    (``"renorm"``).  ``recorder``, when set, is called as
    ``recorder(layer, weights)`` with the ``B×heads×HW×HW`` softmax array on
    every forward pass.
    """

    def __init__(self, config: AttentionConfig, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        self.config = c
        std_in = 1.0 / np.sqrt(c.d_in)
        self.w_q = Parameter(rng.standard_normal((c.d_in, c.d_qk)) * std_in)
        self.w_k = Parameter(rng.standard_normal((c.d_in, c.d_qk)) * std_in)
        self.w_v = Parameter(rng.standard_normal((c.d_in, c.d_out)) * std_in)
        dh = c.d_qk // c.heads
        if c.use_position:
            std_r = 1.0 / np.sqrt(dh)
            self.r_row = Parameter(rng.standard_normal((c.heads, 2 * c.H - 1, dh)) * std_r, decay=False)
            self.r_col = Parameter(rng.standard_normal((c.heads, 2 * c.W - 1, dh)) * std_r, decay=False)
        else:
            self.r_row = None
            self.r_col = None
        self.ablation: str | None = None
        self.recorder: Callable[[AttentionLayer, np.ndarray], None] | None = None

    def forward(self, x: Tensor) -> Tensor:
        return attention_forward(x, self, ablation=self.ablation)


def _batched(x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected C×H×W or B×C×H×W input, got {x.shape}")
    return x, False


def _unbatch(t: Tensor, squeeze: bool) -> Tensor:
    return ops.reshape(t, t.shape[1:]) if squeeze else t


def _project(xf: Tensor, weight: Tensor, heads: int, H: int, W: int) -> Tensor:
    """(B, d_in, HW) -> (B, heads, d/heads, H, W) via a per-pixel matmul."""
    b = xf.shape[0]
    d = weight.shape[1]
    y = ops.matmul(ops.transpose(weight, (1, 0)), xf)
    return ops.reshape(y, (b, heads, d // heads, H, W))


def qkv_project(x, layer: AttentionLayer):
    """Per-head ``q, k, v`` of shape ``[B×]heads×(d/heads)×H×W`` (1×1 convolutions)."""
    xb, squeeze = _batched(x)
    c = layer.config
    b, cin, H, W = xb.shape
    if cin != c.d_in:
        raise ShapeError(f"input has {cin} channels, layer expects d_in={c.d_in}")
    if (H, W) != (c.H, c.W):
        raise ShapeError(f"input grid {H}×{W} does not match layer grid {c.H}×{c.W}")
    xf = ops.reshape(xb, (b, cin, H * W))
    q, k, v = (_project(xf, w, c.heads, H, W) for w in (layer.w_q, layer.w_k, layer.w_v))
    if squeeze:
        q, k, v = (ops.reshape(t, t.shape[1:]) for t in (q, k, v))
    return q, k, v


def _offset_index(n: int) -> np.ndarray:
    i = np.arange(n)
    return i[:, None] - i[None, :] + n - 1


def relative_logits(q: Tensor, layer: AttentionLayer) -> Tensor:
    """``q[i,j] . (r_row[i-h] + r_col[j-w])`` as ``[B×]heads×HW×HW``."""
    if layer.r_row is None:
        raise ValueError("relative_logits needs a layer built with use_position=True")
    squeeze = q.ndim == 4
    if squeeze:
        q = ops.reshape(q, (1,) + q.shape)
    b, n, dh, H, W = q.shape
    r_row = ops.take(layer.r_row, _offset_index(H), axis=1)  # (n, i, h, dh)
    r_col = ops.take(layer.r_col, _offset_index(W), axis=1)  # (n, j, w, dh)
    q_ij = ops.transpose(q, (0, 1, 3, 4, 2))  # (b, n, i, j, dh)
    rel_row = ops.matmul(q_ij, ops.transpose(r_row, (0, 1, 3, 2)))  # (b, n, i, j, h)
    q_ji = ops.transpose(q, (0, 1, 4, 3, 2))  # (b, n, j, i, dh)
    rel_col = ops.matmul(q_ji, ops.transpose(r_col, (0, 1, 3, 2)))  # (b, n, j, i, w)
    rel_col = ops.transpose(rel_col, (0, 1, 3, 2, 4))  # (b, n, i, j, w)
    rel = ops.add(
        ops.reshape(rel_row, (b, n, H, W, H, 1)),
        ops.reshape(rel_col, (b, n, H, W, 1, W)),
    )
    rel = ops.reshape(rel, (b, n, H * W, H * W))
    return _unbatch(rel, squeeze)


def attention_logits(x, layer: AttentionLayer) -> tuple[Tensor, Tensor]:
    """Pre-softmax logits ``B×heads×HW×HW`` and values ``B×heads×HW×d_v`` (always batched)."""
    xb, _ = _batched(x)
    c = layer.config
    q, k, v = qkv_project(xb, layer)
    b, n, dh, H, W = q.shape
    hw = H * W
    qf = ops.transpose(ops.reshape(q, (b, n, dh, hw)), (0, 1, 3, 2))
    kf = ops.reshape(k, (b, n, dh, hw))
    logits = ops.matmul(qf, kf)
    if c.use_position:
        logits = ops.add(logits, relative_logits(q, layer))
    if c.scale_logits:
        logits = ops.mul(logits, 1.0 / np.sqrt(dh))
    vf = ops.transpose(ops.reshape(v, (b, n, v.shape[2], hw)), (0, 1, 3, 2))
    return logits, vf


def attention_weights(x, layer: AttentionLayer) -> tuple[Tensor, Tensor]:
    """Softmax weights ``S`` (``B×heads×HW×HW``, rows = output locations) and values."""
    logits, vf = attention_logits(x, layer)
    return ops.softmax_lastdim(logits), vf


def _merge_heads(o: Tensor, H: int, W: int) -> Tensor:
    b, n, hw, dv = o.shape
    return ops.reshape(ops.transpose(o, (0, 1, 3, 2)), (b, n * dv, H, W))


def attention_forward(x, layer: AttentionLayer, ablation: str | None = None) -> Tensor:
    """Self-attention output ``[B×]d_out×H×W``; heads concatenated on channels."""
    xb, squeeze = _batched(x)
    H, W = layer.config.H, layer.config.W
    logits, vf = attention_logits(xb, layer)
    if ablation == "renorm":
        if H * W == 1:
            raise ValueError("cannot renormalize after removing the only location (H=W=1)")
        weights = ops.softmax_lastdim(logits, mask=~np.eye(H * W, dtype=bool))
        full = None
    else:
        weights = ops.softmax_lastdim(logits)
        full = weights
        if ablation == "drop":
            weights = ops.mul(weights, 1.0 - np.eye(H * W)[None, None])
        elif ablation is not None:
            raise ValueError(f"unknown ablation mode {ablation!r}")
    if layer.recorder is not None:
        layer.recorder(layer, (full if full is not None else ops.softmax_lastdim(logits)).data)
    out = _merge_heads(ops.matmul(weights, vf), H, W)
    return _unbatch(out, squeeze)


def decompose_attention(x, layer: AttentionLayer, layer_id: str = ""):
    """Split :func:`attention_forward` into unary and binary contributions.

    Returns ``(unary, binary, stats)``; ``unary + binary`` reproduces the
    full output up to rounding.
    """
    xb, squeeze = _batched(x)
    H, W = layer.config.H, layer.config.W
    hw = H * W
    weights, vf = attention_weights(xb, layer)
    eye = np.eye(hw)[None, None]
    diag = ops.reshape(ops.sum(ops.mul(weights, eye), axis=-1), weights.shape[:3] + (1,))
    unary = _merge_heads(ops.mul(diag, vf), H, W)
    binary = _merge_heads(ops.matmul(ops.mul(weights, 1.0 - eye), vf), H, W)
    d = np.diagonal(weights.data, axis1=-2, axis2=-1)
    uw = float(d.mean())
    stats = DecompositionStats(
        unary_weight=uw, binary_weight=1.0 - uw, layer_id=layer_id, total=float(d.sum()), count=int(d.size)
    )
    return _unbatch(unary, squeeze), _unbatch(binary, squeeze), stats


def ablate_unary(x, layer: AttentionLayer, renormalize: bool = False) -> Tensor:
    """Attention output with the unary term removed (evaluation-time ablation)."""
    return attention_forward(x, layer, ablation="renorm" if renormalize else "drop")
