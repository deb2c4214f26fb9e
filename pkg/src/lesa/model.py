"""ResNet-style bottleneck backbone with a pluggable spatial operator per stage.

Surgery rules for attention-family operators (``sa``, ``lesa``,
``lesa_static``):

* they may only be placed in stages 3 and 4;
* a block that downsamples (the first block of stage 3) keeps its stride-2
  ``3×3`` convolution;
* an attention-typed stage 4 runs at stride 1, so it keeps the stage-3 grid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .attention import AttentionConfig, AttentionLayer
from .lesa import LesaConfig, LesaLayer
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import Tensor

__all__ = [
    "OPERATORS",
    "ATTENTION_OPS",
    "BackboneSpec",
    "Bottleneck",
    "Backbone",
    "build_backbone",
    "forward_classify",
    "loss_ce",
]

OPERATORS = ("conv", "sa", "lesa", "lesa_static")
ATTENTION_OPS = ("sa", "lesa", "lesa_static")
EXPANSION = 4


class SpecError(ValueError):
    """Invalid backbone specification."""


@dataclass
class BackboneSpec:
    stage_blocks: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    base_channels: int = 16
    op_per_stage: dict[int, str] = field(default_factory=lambda: {1: "conv", 2: "conv", 3: "conv", 4: "conv"})
    heads: int = 8
    num_classes: int = 10
    input_size: int = 32
    in_channels: int = 3
    stem_stride: int = 2
    unary_kernel: int = 3
    use_position: bool = True

    def __post_init__(self):
        self.stage_blocks = [int(b) for b in self.stage_blocks]
        self.op_per_stage = {int(k): str(v) for k, v in self.op_per_stage.items()}
        for s in range(1, len(self.stage_blocks) + 1):
            self.op_per_stage.setdefault(s, "conv")

    @classmethod
    def with_ops(cls, op: str, **kwargs) -> BackboneSpec:
        """Convenience: ``op`` in stages 3 and 4, convolutions elsewhere."""
        return cls(op_per_stage={1: "conv", 2: "conv", 3: op, 4: op}, **kwargs)

    def validate(self) -> None:
        if len(self.stage_blocks) != 4 or min(self.stage_blocks) < 1:
            raise SpecError(f"stage_blocks must list 4 positive counts, got {self.stage_blocks}")
        if set(self.op_per_stage) != {1, 2, 3, 4}:
            raise SpecError(f"op_per_stage must cover stages 1-4, got {sorted(self.op_per_stage)}")
        for stage, op in self.op_per_stage.items():
            if op not in OPERATORS:
                raise SpecError(f"stage {stage}: unknown operator {op!r}; choose from {OPERATORS}")
            if stage <= 2 and op != "conv":
                raise SpecError(f"stage {stage}: operator replacement is only allowed in stages 3 and 4")
        if self.unary_kernel % 2 == 0:
            raise SpecError(f"unary_kernel must be odd, got {self.unary_kernel}")
        for s, mid, _, _ in self.stage_layout():
            if self.op_per_stage[s] != "conv" and mid % self.heads:
                raise SpecError(f"stage {s}: heads={self.heads} does not divide {mid} channels")
        if self.input_size % self.stem_stride:
            raise SpecError("input_size must be divisible by stem_stride")
        if min(hw for *_, hw in self.stage_layout()) < 1:
            raise SpecError(f"input_size {self.input_size} is too small for this many stride-2 stages")

    def stage_layout(self) -> list[tuple[int, int, int, int]]:
        """``(stage, mid_channels, stride, output_grid)`` for stages 1..4."""
        out = []
        hw = self.input_size // self.stem_stride
        for s in range(1, 5):
            stride = 1 if s == 1 else 2
            if s == 4 and self.op_per_stage.get(4, "conv") in ATTENTION_OPS:
                stride = 1
            hw = (hw - 1) // stride + 1
            out.append((s, self.base_channels * 2 ** (s - 1), stride, hw))
        return out

    # -- canonical text (checkpoint headers) ------------------------------------------------
    def to_text(self) -> str:
        d = asdict(self)
        d["stage_blocks"] = ",".join(str(b) for b in self.stage_blocks)
        d["op_per_stage"] = ",".join(self.op_per_stage[s] for s in sorted(self.op_per_stage))
        return "\n".join(f"{k}={_fmt(v)}" for k, v in sorted(d.items())) + "\n"

    @classmethod
    def from_text(cls, text: str) -> BackboneSpec:
        raw = dict(line.split("=", 1) for line in text.strip().splitlines() if line.strip())
        kwargs = {}
        for key, value in raw.items():
            if key == "stage_blocks":
                kwargs[key] = [int(v) for v in value.split(",")]
            elif key == "op_per_stage":
                kwargs[key] = {i + 1: v for i, v in enumerate(value.split(","))}
            elif key == "use_position":
                kwargs[key] = value == "true"
            elif key in cls.__dataclass_fields__:
                kwargs[key] = int(value)
            else:
                raise SpecError(f"unknown architecture key {key!r}")
        return cls(**kwargs)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


class Bottleneck(Module):
    """``relu(expand(spatial(reduce(x))) + skip(x))`` with channel expansion 4."""

    def __init__(self, c_in: int, mid: int, stride: int, op: str, grid: int, spec: BackboneSpec, rng):
        super().__init__()
        c_out = mid * EXPANSION
        self.op = op
        self.stride = stride
        self.reduce = Conv2d(c_in, mid, 1, rng=rng)
        self.bn1 = BatchNorm2d(mid)
        if op == "conv":
            self.spatial = Conv2d(mid, mid, 3, stride=stride, rng=rng)
        elif op == "sa":
            self.spatial = AttentionLayer(
                AttentionConfig(mid, mid, mid, grid, grid, heads=spec.heads, use_position=spec.use_position),
                rng=rng,
            )
        else:
            self.spatial = LesaLayer(
                LesaConfig(
                    mid, mid, grid, grid, heads=spec.heads, k=spec.unary_kernel,
                    mode="dynamic" if op == "lesa" else "static", use_position=spec.use_position,
                ),
                rng=rng,
            )
        self.bn2 = BatchNorm2d(mid)
        self.expand = Conv2d(mid, c_out, 1, rng=rng)
        self.bn3 = BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, stride=stride, rng=rng)
            self.proj_bn = BatchNorm2d(c_out)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        h = ops.relu(self.bn1(self.reduce(x)))
        h = ops.relu(self.bn2(self.spatial(h)))
        h = self.bn3(self.expand(h))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return ops.relu(ops.add(h, skip))


class Backbone(Module):
    def __init__(self, spec: BackboneSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        base = spec.base_channels
        self.stem = Conv2d(spec.in_channels, base, 3, stride=spec.stem_stride, rng=rng)
        self.stem_bn = BatchNorm2d(base)
        blocks = []
        c_in = base
        for (s, mid, stride, grid), n in zip(spec.stage_layout(), spec.stage_blocks):
            op = spec.op_per_stage[s]
            for i in range(n):
                st = stride if i == 0 else 1
                block_op = "conv" if st != 1 else op
                blocks.append(Bottleneck(c_in, mid, st, block_op, grid, spec, rng))
                blocks[-1].stage = s
                c_in = mid * EXPANSION
        self.blocks = blocks
        self.head = Linear(c_in, spec.num_classes, rng=rng)

    def trace(self, x: Tensor) -> Iterator[tuple[str, Tensor]]:
        """Yield ``(name, output)`` after the stem, every block, the pool and the head."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        h = ops.relu(self.stem_bn(self.stem(x)))
        yield "stem", h
        for i, block in enumerate(self.blocks):
            h = block(h)
            yield f"blocks.{i}", h
        pooled = ops.mean(h, axis=(2, 3))
        yield "pool", pooled
        yield "head", self.head(pooled)

    def forward(self, x: Tensor) -> Tensor:
        out = None
        for _, out in self.trace(x):
            pass
        return out

    def stage_outputs(self, x: Tensor) -> dict[int, Tensor]:
        """Output of the last block of every stage."""
        outs: dict[int, Tensor] = {}
        for name, h in self.trace(x):
            if name.startswith("blocks."):
                outs[self.blocks[int(name.split(".")[1])].stage] = h
        return outs

    def instrumented_layers(self) -> list[tuple[str, Module]]:
        """``(name, layer)`` for every attention or LESA spatial operator, in depth order."""
        return [
            (name, m)
            for name, m in self.named_modules()
            if isinstance(m, (AttentionLayer, LesaLayer)) and not name.endswith(".attention")
        ]


def build_backbone(spec: BackboneSpec, seed: int = 0) -> Backbone:
    spec.validate()
    return Backbone(spec, np.random.default_rng(seed))


def forward_classify(model: Backbone, batch) -> Tensor:
    return model(batch)


def loss_ce(logits: Tensor, labels) -> Tensor:
    return ops.cross_entropy(logits, labels)
