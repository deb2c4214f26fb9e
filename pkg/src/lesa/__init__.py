"""Locally enhanced self-attention on a small numpy autograd engine."""

from .attention import (
    AttentionConfig,
    AttentionLayer,
    DecompositionStats,
    ablate_unary,
    attention_forward,
    decompose_attention,
)
from .lesa import FusionGate, LesaConfig, LesaLayer, UnaryTerm, fusion_weight, lesa_components, lesa_forward, lesa_weight_stats
from .model import Backbone, BackboneSpec, Bottleneck, SpecError, build_backbone, forward_classify, loss_ce
from .tensor import GraphError, NumericError, Parameter, ShapeError, Tensor, no_grad, tensor

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "AttentionLayer", "DecompositionStats", "ablate_unary", "attention_forward",
    "decompose_attention", "FusionGate", "LesaConfig", "LesaLayer", "UnaryTerm", "fusion_weight",
    "lesa_components", "lesa_forward", "lesa_weight_stats", "Backbone", "BackboneSpec", "Bottleneck",
    "SpecError", "build_backbone", "forward_classify", "loss_ce", "GraphError", "NumericError",
    "Parameter", "ShapeError", "Tensor", "no_grad", "tensor",
]
