"""Central finite-difference checks of every differentiable op and layer.

Each registry entry builds a random instance: a closure computing the output
from a set of leaf tensors.  The output is projected onto a fixed random
direction to get a scalar, whose analytic gradient (via ``backward``) is
compared with ``(f(x+h) - f(x-h)) / 2h`` element by element.

Relative error per element is ``|a - n| / max(|a|, |n|, floor)``.  The floor
(default ``1e-5``) keeps entries whose true gradient is essentially zero from
dividing roundoff by roundoff: with ``h = 1e-6`` the central difference
carries noise around ``eps * |f| / h``, i.e. ``1e-10`` for unit-size outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .attention import AttentionConfig, AttentionLayer, attention_forward
from .lesa import FusionGate, LesaConfig, LesaLayer, fusion_weight
from .model import BackboneSpec, Bottleneck
from .nn import Module
from .tensor import Tensor, no_grad, set_finite_checks

__all__ = ["GradcheckResult", "REGISTRY", "check_gradients", "run_gradcheck"]

DEFAULT_H = 1e-6
DEFAULT_FLOOR = 1e-5

Case = tuple[Callable[[], Tensor], list[Tensor]]


@dataclass
class GradcheckResult:
    name: str
    instances: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def check_gradients(fn: Callable[[], Tensor], leaves: list[Tensor], rng, h: float = DEFAULT_H, floor: float = DEFAULT_FLOOR) -> float:
    """Max elementwise relative error between analytic and numeric gradients."""
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    out = fn()
    proj = rng.standard_normal(out.shape)
    ops.sum(ops.mul(out, Tensor(proj))).backward()
    analytic = [t.grad.copy() for t in leaves]

    def f() -> float:
        with no_grad():
            return float(np.sum(fn().data * proj))

    worst = 0.0
    for t, a in zip(leaves, analytic):
        flat = t.data.reshape(-1)  # view: perturbations write through
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            num[i] = (fp - fm) / (2 * h)
        a = a.reshape(-1)
        err = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        worst = max(worst, float(err.max()))
    return worst


def _leaf(rng, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _module_case(module: Module, x: Tensor, call) -> Case:
    return (lambda: call(x)), [x] + module.parameters()


# -- primitive ops ---------------------------------------------------------------------


def _case_add(rng) -> Case:
    a, b = _leaf(rng, 3, 4), _leaf(rng, 1, 4)
    return (lambda: ops.add(a, b)), [a, b]


def _case_sub(rng) -> Case:
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 3, 4)
    return (lambda: ops.sub(a, b)), [a, b]


def _case_mul(rng) -> Case:
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 1, 4)
    return (lambda: ops.mul(a, b)), [a, b]


def _case_matmul(rng) -> Case:
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    return (lambda: ops.matmul(a, b)), [a, b]


def _case_sum(rng) -> Case:
    x = _leaf(rng, 2, 3, 4)
    return (lambda: ops.sum(x, axis=1, keepdims=True)), [x]


def _case_mean(rng) -> Case:
    x = _leaf(rng, 2, 3, 4)
    return (lambda: ops.mean(x, axis=(0, 2))), [x]


def _case_reshape_transpose(rng) -> Case:
    x = _leaf(rng, 2, 3, 4)
    return (lambda: ops.transpose(ops.reshape(x, (6, 4)), (1, 0))), [x]


def _case_take(rng) -> Case:
    x = _leaf(rng, 5, 3)
    idx = rng.integers(0, 5, size=(4, 2))
    return (lambda: ops.take(x, idx, axis=0)), [x]


def _case_concat(rng) -> Case:
    a, b = _leaf(rng, 2, 3, 2, 2), _leaf(rng, 2, 1, 2, 2)
    return (lambda: ops.concat([a, b], axis=1)), [a, b]


def _case_relu(rng) -> Case:
    x = _leaf(rng, 3, 5)
    # keep entries away from the kink so the finite difference is well defined
    x.data += np.sign(x.data) * 1e-3
    return (lambda: ops.relu(x)), [x]


def _case_sigmoid(rng) -> Case:
    x = _leaf(rng, 3, 5, scale=2.0)
    return (lambda: ops.sigmoid(x)), [x]


def _case_softmax(rng) -> Case:
    x = _leaf(rng, 2, 3, 5)
    mask = rng.random((2, 3, 5)) > 0.2
    mask[..., 0] = True
    return (lambda: ops.softmax_lastdim(x, mask=mask)), [x]


def _case_log_softmax(rng) -> Case:
    x = _leaf(rng, 3, 6)
    return (lambda: ops.log_softmax(x)), [x]


def _case_cross_entropy(rng) -> Case:
    x = _leaf(rng, 4, 5)
    labels = rng.integers(0, 5, size=4)
    return (lambda: ops.cross_entropy(x, labels)), [x]


def _case_conv2d(rng) -> Case:
    groups = int(rng.choice([1, 2]))
    stride = int(rng.choice([1, 2]))
    k = int(rng.choice([1, 3]))
    size = int(rng.choice([5, 9]))  # 9×9 at stride 1 exercises the large-grid path
    x = _leaf(rng, 2, 4, size, size)
    w = _leaf(rng, 4, 4 // groups, k, k, scale=0.5)
    return (lambda: ops.conv2d(x, w, groups=groups, stride=stride, padding=(k - 1) // 2)), [x, w]


def _case_batchnorm_train(rng) -> Case:
    x = _leaf(rng, 3, 4, 3, 3)
    g, b = _leaf(rng, 4), _leaf(rng, 4)
    return (lambda: ops.batchnorm(x, g, b, training=True)), [x, g, b]


def _case_batchnorm_eval(rng) -> Case:
    x = _leaf(rng, 3, 4, 3, 3)
    g, b = _leaf(rng, 4), _leaf(rng, 4)
    mean, var = rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)
    return (lambda: ops.batchnorm(x, g, b, mean, var, training=False)), [x, g, b]


# -- composite layers ------------------------------------------------------------------------


def _case_sa(rng) -> Case:
    heads = int(rng.choice([1, 2]))
    H, W = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    layer = AttentionLayer(AttentionConfig(4, 4, 4, H, W, heads=heads), rng=rng)
    x = _leaf(rng, 2, 4, H, W)
    return _module_case(layer, x, lambda t: attention_forward(t, layer))


def _case_lesa(rng) -> Case:
    H, W = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    layer = LesaLayer(LesaConfig(4, 4, H, W, heads=2), rng=rng)
    x = _leaf(rng, 2, 4, H, W)
    return _module_case(layer, x, layer)


def _case_gate(rng) -> Case:
    gate = FusionGate(3, rng=rng)
    for bn in (gate.bn0, gate.bn1, gate.bn2):
        bn.gamma.data = rng.uniform(0.5, 1.5, bn.gamma.shape)
        bn.beta.data = 0.3 * rng.standard_normal(bn.beta.shape)
    m, b = _leaf(rng, 2, 3, 3, 3), _leaf(rng, 2, 3, 3, 3)
    return (lambda: fusion_weight(m, b, gate)), [m, b] + gate.parameters()


def _case_bottleneck(rng) -> Case:
    op = str(rng.choice(["conv", "sa", "lesa", "lesa_static"]))
    spec = BackboneSpec(heads=2)
    stride = 2 if op == "conv" and rng.random() < 0.5 else 1
    block = Bottleneck(8, 2, stride, op, 3, spec, rng)
    x = _leaf(rng, 2, 8, 3, 3)
    return _module_case(block, x, block)


REGISTRY: dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "matmul": _case_matmul,
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape_transpose": _case_reshape_transpose,
    "take": _case_take,
    "concat": _case_concat,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "cross_entropy": _case_cross_entropy,
    "conv2d": _case_conv2d,
    "batchnorm_train": _case_batchnorm_train,
    "batchnorm_eval": _case_batchnorm_eval,
    "sa": _case_sa,
    "lesa": _case_lesa,
    "fusion_gate": _case_gate,
    "bottleneck": _case_bottleneck,
}


def run_gradcheck(
    names: list[str] | None = None,
    instances: int = 20,
    seed: int = 0,
    h: float = DEFAULT_H,
    tolerance: float = 1e-4,
) -> list[GradcheckResult]:
    names = list(REGISTRY) if not names else names
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown gradcheck entries {unknown}; available: {sorted(REGISTRY)}")
    results = []
    prev = set_finite_checks(False)
    try:
        for i, name in enumerate(names):
            rng = np.random.default_rng([seed, i])
            worst = 0.0
            for _ in range(instances):
                fn, leaves = REGISTRY[name](rng)
                worst = max(worst, check_gradients(fn, leaves, rng, h=h))
            results.append(GradcheckResult(name, instances, worst, tolerance))
    finally:
        set_finite_checks(prev)
    return results
