"""Model and optimizer state <-> ``LESA`` checkpoint files."""

from __future__ import annotations

import difflib
from dataclasses import asdict

import numpy as np

from .io import Checkpoint, FormatError, load_checkpoint, save_checkpoint
from .model import Backbone, BackboneSpec, build_backbone
from .trainer import OptimConfig, TrainState

__all__ = [
    "ArchitectureMismatch",
    "checkpoint_save",
    "checkpoint_load",
    "save_training_checkpoint",
    "architecture_diff",
]


class ArchitectureMismatch(ValueError):
    """Checkpoint architecture text differs from the expected spec."""


def architecture_diff(expected: str, found: str) -> str:
    lines = difflib.unified_diff(
        expected.splitlines(), found.splitlines(), fromfile="config", tofile="checkpoint", lineterm=""
    )
    return "\n".join(lines)


def _to_checkpoint(model: Backbone, state: TrainState | None, cfg: OptimConfig | None) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        tensors[f"param/{name}"] = p.data
    for name, buf in model.named_buffers():
        tensors[f"buffer/{name}"] = buf
    meta: dict = {}
    if state is not None:
        for name, buf in state.momentum.items():
            tensors[f"momentum/{name}"] = buf
        meta["state"] = state.meta()
    if cfg is not None:
        meta["optim"] = asdict(cfg)
    return Checkpoint(model.spec.to_text(), tensors, meta)


def checkpoint_save(model: Backbone, state: TrainState | None, path: str, cfg: OptimConfig | None = None) -> None:
    """Write parameters, BN running stats and (optionally) optimizer state."""
    save_checkpoint(path, _to_checkpoint(model, state, cfg))


def save_training_checkpoint(path: str, model: Backbone, state: TrainState, cfg: OptimConfig) -> None:
    checkpoint_save(model, state, path, cfg)


def checkpoint_load(
    path: str, expected: BackboneSpec | None = None
) -> tuple[Backbone, TrainState | None, OptimConfig | None]:
    """Rebuild the model (and optimizer state, if stored) from ``path``.

    With ``expected`` given, the stored architecture text must match it
    exactly; otherwise :class:`ArchitectureMismatch` carries a unified diff.
    """
    ckpt = load_checkpoint(path)
    if expected is not None and expected.to_text() != ckpt.architecture:
        raise ArchitectureMismatch(
            f"{path}: architecture does not match config\n" + architecture_diff(expected.to_text(), ckpt.architecture)
        )
    try:
        spec = BackboneSpec.from_text(ckpt.architecture)
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable architecture text: {exc}") from exc
    model = build_backbone(spec)
    weights = {}
    momentum = {}
    for name, arr in ckpt.tensors.items():
        kind, _, key = name.partition("/")
        if kind in ("param", "buffer"):
            weights[key] = arr
        elif kind == "momentum":
            momentum[key] = arr
        else:
            raise FormatError(f"{path}: unexpected tensor {name!r}")
    model.load_state_dict(weights)

    state = None
    if "state" in ckpt.meta:
        m = ckpt.meta["state"]
        state = TrainState(
            epoch=m["epoch"],
            step=m["step"],
            lr_current=m["lr_current"],
            seed=m["seed"],
            momentum=momentum,
            history=m["history"],
            best_eval_acc=m["best_eval_acc"],
        )
    cfg = OptimConfig(**ckpt.meta["optim"]) if "optim" in ckpt.meta else None
    return model, state, cfg
