"""Locally enhanced self-attention.

The layer output is ``m + omega * b`` where

* ``m`` (unary term) is a grouped ``k×k`` convolution followed by a ``1×1``
  projection of the input,
* ``b`` (binary term) is the full all-to-all attention output, and
* ``omega`` is a per-location, per-channel gate in (0, 1) produced by
  ``BN -> relu -> fc1 -> BN -> relu -> fc2 -> BN -> sigmoid`` applied to
  the channel concatenation ``m || b``.

The static variant drops the gate and returns ``m + b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .attention import AttentionConfig, AttentionLayer, attention_forward
from .nn import BatchNorm2d, Module
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "UnaryTerm",
    "FusionGate",
    "LesaLayer",
    "unary_term",
    "binary_term",
    "fusion_weight",
    "lesa_forward",
    "lesa_components",
    "lesa_weight_stats",
]


class UnaryTerm(Module):
    """``m = proj_1x1(grouped_conv_kxk(x))``, no bias and nothing in between."""

    def __init__(self, d_in: int, d_out: int, k: int = 3, groups: int = 8, rng=None):
        super().__init__()
        if k % 2 == 0:
            raise ShapeError(f"unary kernel size must be odd, got k={k}")
        if d_in % groups or d_out % groups:
            raise ShapeError(f"groups={groups} must divide d_in={d_in} and d_out={d_out}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan = (d_in // groups) * k * k
        self.w_g = Parameter(rng.standard_normal((d_out, d_in // groups, k, k)) / np.sqrt(fan))
        self.w_1 = Parameter(rng.standard_normal((d_out, d_out, 1, 1)) / np.sqrt(d_out))
        self.k, self.groups = k, groups

    def forward(self, x: Tensor) -> Tensor:
        return unary_term(x, self)


def unary_term(x, unary: UnaryTerm) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    h = ops.conv2d(x, unary.w_g, groups=unary.groups, padding="same")
    return ops.conv2d(h, unary.w_1)


class FusionGate(Module):
    """Pre-activation three-layer perceptron over ``m || b`` followed by a sigmoid."""

    def __init__(self, d_out: int, rng=None, eps: float = 1e-5):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.bn0 = BatchNorm2d(2 * d_out, eps=eps)
        self.fc1 = Parameter(rng.standard_normal((d_out, 2 * d_out, 1, 1)) / np.sqrt(2 * d_out))
        self.bn1 = BatchNorm2d(d_out, eps=eps)
        self.fc2 = Parameter(rng.standard_normal((d_out, d_out, 1, 1)) / np.sqrt(d_out))
        self.bn2 = BatchNorm2d(d_out, eps=eps)
        self.d_out = d_out

    def forward(self, m: Tensor, b: Tensor) -> Tensor:
        return fusion_weight(m, b, self)


def fusion_weight(m, b, gate: FusionGate, mode: str | None = None) -> Tensor:
    """Gate ``omega`` with the shape of ``m``.

    ``mode`` is ``"train"`` or ``"eval"`` (BN batch vs running statistics);
    ``None`` follows ``gate.training``.
    """
    m = m if isinstance(m, Tensor) else Tensor(m)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if m.shape != b.shape:
        raise ShapeError(f"unary term {m.shape} and binary term {b.shape} must have the same shape")
    squeeze = m.ndim == 3
    if squeeze:
        m, b = ops.reshape(m, (1,) + m.shape), ops.reshape(b, (1,) + b.shape)
    if m.shape[1] != gate.d_out:
        raise ShapeError(f"gate expects {gate.d_out} channels per term, got {m.shape[1]}")
    if mode not in (None, "train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = gate.training if mode is None else mode == "train"

    def bn(layer: BatchNorm2d, t: Tensor) -> Tensor:
        return ops.batchnorm(
            t, layer.gamma, layer.beta, layer.running_mean, layer.running_var,
            training=training, momentum=layer.momentum, eps=layer.eps,
        )

    z = bn(gate.bn0, ops.concat([m, b], axis=1))
    z = ops.conv2d(ops.relu(z), gate.fc1)
    z = bn(gate.bn1, z)
    z = ops.conv2d(ops.relu(z), gate.fc2)
    omega = ops.sigmoid(bn(gate.bn2, z))
    return ops.reshape(omega, omega.shape[1:]) if squeeze else omega


def binary_term(x, attention: AttentionLayer) -> Tensor:
    """Full attention sum (position term included when the layer has one)."""
    return attention_forward(x, attention, ablation=attention.ablation)


@dataclass
class LesaConfig:
    d_in: int
    d_out: int
    H: int
    W: int
    heads: int = 8
    k: int = 3
    groups: int | None = None  # defaults to heads
    mode: str = "dynamic"  # or "static"
    use_position: bool = True


class LesaLayer(Module):
    """Unary convolution path + attention binary path + optional fusion gate.

    ``force_omega`` (a float) bypasses the gate and uses a constant
    ``omega``.  ``recorder``, when set, is called as ``recorder(layer, m, b,
    omega)`` with numpy arrays on every forward pass (``omega`` is ``None``
    in static mode).
    """

    def __init__(self, config: LesaConfig, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        if c.mode not in ("dynamic", "static"):
            raise ValueError(f"mode must be 'dynamic' or 'static', got {c.mode!r}")
        self.config = c
        self.attention = AttentionLayer(
            AttentionConfig(c.d_in, c.d_out, c.d_out, c.H, c.W, heads=c.heads, use_position=c.use_position),
            rng=rng,
        )
        self.unary = UnaryTerm(c.d_in, c.d_out, k=c.k, groups=c.groups or c.heads, rng=rng)
        self.gate = FusionGate(c.d_out, rng=rng) if c.mode == "dynamic" else None
        self.force_omega: float | None = None
        self.recorder: Callable | None = None

    @property
    def mode(self) -> str:
        return self.config.mode

    def forward(self, x: Tensor) -> Tensor:
        return lesa_forward(x, self)


def lesa_components(x, layer: LesaLayer) -> tuple[Tensor, Tensor, Tensor | None]:
    """``(m, b, omega)`` for one forward pass; ``omega`` is ``None`` for static layers."""
    m = unary_term(x, layer.unary)
    b = binary_term(x, layer.attention)
    if layer.force_omega is not None:
        omega = Tensor(np.full(m.shape, float(layer.force_omega)))
    elif layer.gate is not None:
        omega = fusion_weight(m, b, layer.gate)
    else:
        omega = None
    return m, b, omega


def lesa_forward(x, layer: LesaLayer) -> Tensor:
    m, b, omega = lesa_components(x, layer)
    out = ops.add(m, b) if omega is None else ops.add(m, ops.mul(omega, b))
    if layer.recorder is not None:
        layer.recorder(layer, m.data, b.data, None if omega is None else omega.data)
    return out


def lesa_weight_stats(omega) -> tuple[float, float]:
    """Mean unary and binary shares ``1/(1+omega)`` and ``omega/(1+omega)`` (fractions)."""
    w = omega.data if isinstance(omega, Tensor) else np.asarray(omega, dtype=np.float64)
    unary = float(np.mean(1.0 / (1.0 + w)))
    binary = float(np.mean(w / (1.0 + w)))
    return unary, binary
