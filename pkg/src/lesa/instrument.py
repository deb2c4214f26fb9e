"""Measurement protocols on trained backbones.

* Softmax weight tracking: for every self-attention layer, the mean softmax
  weight a location assigns to itself (the unary share) vs. everything else.
* Gate-derived shares for LESA layers: ``1/(1+omega)`` and
  ``omega/(1+omega)`` averaged over locations, channels and samples.
* Unary ablation: evaluation accuracy with and without the unary term.
* Contribution maps: per-layer unary / binary / gate tensors written to disk.

All percentages in reports are on a 0-100 scale.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .attention import AttentionLayer, decompose_attention
from .lesa import LesaLayer, lesa_components
from .nn import Module
from .tensor import Tensor, no_grad

__all__ = [
    "LayerRow",
    "WeightReport",
    "AblationResult",
    "WeightAccumulator",
    "collect_layer_stats",
    "run_weight_tracking",
    "run_unary_ablation",
    "evaluate_accuracy",
    "export_contribution_maps",
    "iterate_batches",
]


@dataclass
class LayerRow:
    layer_id: str
    kind: str  # "sa" | "lesa" | "lesa_static"
    unary_pct: float
    binary_pct: float
    count: int = 0


@dataclass
class WeightReport:
    per_layer: list[LayerRow]
    overall_unary_pct: float
    overall_binary_pct: float
    sample_count: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer_id", "kind", "unary_pct", "binary_pct", "count"])
        for r in self.per_layer:
            writer.writerow([r.layer_id, r.kind, repr(r.unary_pct), repr(r.binary_pct), r.count])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "overall": {"unary_pct": self.overall_unary_pct, "binary_pct": self.overall_binary_pct},
                "sample_count": self.sample_count,
                "per_layer": [asdict(r) for r in self.per_layer],
            },
            indent=2,
        )


@dataclass
class AblationResult:
    baseline_accuracy: float
    ablated_accuracy: float
    residual_weight_pct: float
    renormalize: bool = False
    sample_count: int = 0


@dataclass
class WeightAccumulator:
    """Running sums of unary shares per layer; merging is exact up to addition order."""

    sums: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    kinds: dict[str, str] = field(default_factory=dict)
    samples: int = 0

    def add(self, layer_id: str, kind: str, values: np.ndarray) -> None:
        self.kinds.setdefault(layer_id, kind)
        self.sums[layer_id] = self.sums.get(layer_id, 0.0) + float(np.sum(values))
        self.counts[layer_id] = self.counts.get(layer_id, 0) + int(values.size)

    def merge(self, other: WeightAccumulator) -> WeightAccumulator:
        out = WeightAccumulator(dict(self.sums), dict(self.counts), dict(self.kinds), self.samples + other.samples)
        for key in other.sums:
            out.kinds.setdefault(key, other.kinds[key])
            out.sums[key] = out.sums.get(key, 0.0) + other.sums[key]
            out.counts[key] = out.counts.get(key, 0) + other.counts[key]
        return out

    def report(self) -> WeightReport:
        if not self.sums:
            raise ValueError("no instrumented layers were observed")
        rows = []
        for key in self.sums:  # insertion order == depth order
            unary = 100.0 * self.sums[key] / self.counts[key]
            rows.append(LayerRow(key, self.kinds[key], unary, 100.0 - unary, self.counts[key]))
        overall = float(np.mean([r.unary_pct for r in rows]))
        return WeightReport(rows, overall, 100.0 - overall, self.samples)


def _unary_shares_from_weights(weights: np.ndarray) -> np.ndarray:
    return np.diagonal(weights, axis1=-2, axis2=-1)


def _unary_shares_from_omega(omega: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + omega)


def _layer_kind(layer: Module) -> str:
    if isinstance(layer, LesaLayer):
        return "lesa" if layer.mode == "dynamic" else "lesa_static"
    return "sa"


@contextlib.contextmanager
def _recording(model, acc: WeightAccumulator) -> Iterator[None]:
    layers = model.instrumented_layers()
    if not layers:
        raise ValueError("model has no attention or LESA layers to instrument")

    def sa_hook(layer_id):
        def hook(layer, weights):
            acc.add(layer_id, "sa", _unary_shares_from_weights(weights))

        return hook

    def lesa_hook(layer_id, kind):
        def hook(layer, m, b, omega):
            # static LESA has an implicit omega of 1
            w = np.ones_like(m) if omega is None else omega
            acc.add(layer_id, kind, _unary_shares_from_omega(w))

        return hook

    try:
        for name, layer in layers:
            if isinstance(layer, LesaLayer):
                layer.recorder = lesa_hook(name, _layer_kind(layer))
            else:
                layer.recorder = sa_hook(name)
        yield
    finally:
        for _, layer in layers:
            layer.recorder = None


def iterate_batches(images: np.ndarray, labels: np.ndarray, batch_size: int, max_batches: int | None = None):
    """Fixed-order batches (no shuffling)."""
    n = len(images)
    if n == 0:
        raise ValueError("dataset is empty")
    for i, start in enumerate(range(0, n, batch_size)):
        if max_batches is not None and i >= max_batches:
            return
        yield images[start : start + batch_size], labels[start : start + batch_size]


def collect_layer_stats(model, batch, acc: WeightAccumulator | None = None) -> WeightReport:
    """Run one batch in eval mode and report per-layer unary/binary shares."""
    acc = acc if acc is not None else WeightAccumulator()
    model.eval()
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    with no_grad(), _recording(model, acc):
        model(x)
    acc.samples += x.shape[0]
    return acc.report()


def run_weight_tracking(model, dataset, max_batches: int | None = None, batch_size: int = 100) -> WeightReport:
    """Stream ``dataset`` (``(images, labels)`` or an iterable of batches) through the model."""
    acc = WeightAccumulator()
    model.eval()
    seen = False
    with no_grad(), _recording(model, acc):
        for i, (xb, _) in enumerate(_batches(dataset, batch_size)):
            if max_batches is not None and i >= max_batches:
                break
            model(Tensor(xb))
            acc.samples += len(xb)
            seen = True
    if not seen:
        raise ValueError("dataset is empty")
    return acc.report()


def _batches(dataset, batch_size: int) -> Iterable:
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray):
        return iterate_batches(dataset[0], dataset[1], batch_size)
    return dataset


def evaluate_accuracy(model, dataset, batch_size: int = 100) -> float:
    model.eval()
    correct = total = 0
    with no_grad():
        for xb, yb in _batches(dataset, batch_size):
            logits = model(Tensor(xb)).data
            correct += int(np.sum(np.argmax(logits, axis=1) == yb))
            total += len(yb)
    if total == 0:
        raise ValueError("dataset is empty")
    return correct / total


def run_unary_ablation(model, dataset, renormalize: bool = False, batch_size: int = 100) -> AblationResult:
    """Accuracy with the full attention sum vs. with the unary term removed.

    Only plain self-attention layers are ablated; they must exist.
    """
    layers = [layer for _, layer in model.instrumented_layers() if isinstance(layer, AttentionLayer)]
    if not layers:
        raise ValueError("model has no self-attention layers to ablate")
    if not isinstance(dataset, tuple):
        dataset = list(dataset)
    baseline = evaluate_accuracy(model, dataset, batch_size)
    tracked = run_weight_tracking(model, dataset, batch_size=batch_size)
    sa_rows = [r for r in tracked.per_layer if r.kind == "sa"]
    residual = float(np.mean([r.binary_pct for r in sa_rows]))
    mode = "renorm" if renormalize else "drop"
    try:
        for layer in layers:
            layer.ablation = mode
        ablated = evaluate_accuracy(model, dataset, batch_size)
    finally:
        for layer in layers:
            layer.ablation = None
    n = len(dataset[0]) if isinstance(dataset, tuple) else sum(len(b[1]) for b in dataset)
    return AblationResult(baseline, ablated, residual, renormalize, n)


def export_contribution_maps(model, image: np.ndarray, out_dir: str) -> list[str]:
    """Write per-layer contribution tensors for one ``C×H×W`` image.

    Self-attention layers produce ``<layer>.unary.lten`` and
    ``<layer>.binary.lten``; LESA layers produce ``.unary`` (m),
    ``.binary`` (b) and, when gated, ``.omega``.  Returns the written paths.
    """
    from .io import write_tensor

    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"export_contribution_maps expects one C×H×W image, got shape {image.shape}")
    layers = model.instrumented_layers()
    if not layers:
        raise ValueError("model has no attention or LESA layers")
    model.eval()
    with no_grad(), _capture_inputs(layers) as inputs:
        model(Tensor(image[None]))
    captured: dict[str, dict[str, np.ndarray]] = {}
    with no_grad():
        for name, layer in layers:
            x = inputs[name]
            if isinstance(layer, LesaLayer):
                m, b, omega = lesa_components(x, layer)
                maps = {"unary": m.data[0], "binary": b.data[0]}
                if omega is not None:
                    maps["omega"] = omega.data[0]
            else:
                u, bt, _ = decompose_attention(x, layer)
                maps = {"unary": u.data[0], "binary": bt.data[0]}
            captured[name] = maps
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, maps in captured.items():
        for kind, arr in maps.items():
            path = os.path.join(out_dir, f"{name}.{kind}.lten")
            write_tensor(path, arr)
            paths.append(path)
    return paths


@contextlib.contextmanager
def _capture_inputs(layers) -> Iterator[dict[str, Tensor]]:
    """Record the input each layer sees during the next forward pass."""
    inputs: dict[str, Tensor] = {}
    try:
        for name, layer in layers:
            cls_forward = type(layer).forward

            def forward(x, _layer=layer, _name=name, _fwd=cls_forward):
                inputs[_name] = x
                return _fwd(_layer, x)

            layer.forward = forward
        yield inputs
    finally:
        for _, layer in layers:
            vars(layer).pop("forward", None)
