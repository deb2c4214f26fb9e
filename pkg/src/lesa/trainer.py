"""SGD with Nesterov momentum, linear warmup + cosine annealing, epoch loop."""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .instrument import evaluate_accuracy
from .tensor import NumericError, Parameter, Tensor, set_finite_checks

__all__ = [
    "OptimConfig",
    "TrainState",
    "TrainingDiverged",
    "lr_schedule",
    "sgd_nesterov_step",
    "train",
    "find_first_nonfinite",
    "METRIC_COLUMNS",
]

METRIC_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "eval_acc", "wall_seconds")


@dataclass
class OptimConfig:
    lr_init: float = 0.05
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    warmup_epochs: float = 5.0
    total_epochs: int = 20
    batch_size: int = 64
    per_step_schedule: bool = False
    augment_flip: bool = False

    def validate(self) -> None:
        if self.lr_init < 0:
            raise ValueError(f"lr_init must be non-negative, got {self.lr_init}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(
                f"warmup_epochs ({self.warmup_epochs}) must be below total_epochs ({self.total_epochs})"
            )
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


class TrainingDiverged(NumericError):
    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message)
        self.layer = layer


@dataclass
class TrainState:
    epoch: int = 0  # completed epochs
    step: int = 0
    lr_current: float = 0.0
    seed: int = 0
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    best_eval_acc: float = -1.0

    def meta(self) -> dict:
        return {
            "epoch": self.epoch,
            "step": self.step,
            "lr_current": self.lr_current,
            "seed": self.seed,
            "history": self.history,
            "best_eval_acc": self.best_eval_acc,
        }


def lr_schedule(t: float, cfg: OptimConfig) -> float:
    """Learning rate at epoch progress ``t``: linear ramp from 0, then cosine to 0."""
    if not 0 <= t <= cfg.total_epochs:
        raise ValueError(f"t={t} outside [0, {cfg.total_epochs}]")
    warm = cfg.warmup_epochs
    if t < warm:
        return cfg.lr_init * t / warm
    progress = (t - warm) / (cfg.total_epochs - warm)
    return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_nesterov_step(
    params: Sequence[tuple[str, Parameter]],
    state: TrainState,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    nesterov: bool = True,
) -> None:
    """In-place update.  ``buf <- mu*buf + g``; ``p <- p - lr*(g + mu*buf)`` (Nesterov)."""
    for name, p in params:
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient; run backward() first")
    for name, p in params:
        g = p.grad
        if weight_decay and p.decay:
            g = g + weight_decay * p.data
        buf = state.momentum.get(name)
        buf = g.copy() if buf is None else momentum * buf + g
        state.momentum[name] = buf
        update = g + momentum * buf if nesterov else buf
        p.data = p.data - lr * update


def find_first_nonfinite(model, x: np.ndarray) -> str | None:
    """Name of the first stage whose output contains NaN/Inf on input ``x``."""
    prev = set_finite_checks(False)
    try:
        for name, out in model.trace(Tensor(x)):
            if not np.all(np.isfinite(out.data)):
                return name
    finally:
        set_finite_checks(prev)
    return None


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch)])


def train(
    model,
    train_data: tuple[np.ndarray, np.ndarray],
    eval_data: tuple[np.ndarray, np.ndarray] | None,
    cfg: OptimConfig,
    seed: int = 0,
    state: TrainState | None = None,
    callbacks: Sequence[Callable[[TrainState, object], None]] = (),
    out_dir: str | None = None,
    max_epochs: int | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainState:
    """Train ``model`` in place and return the final :class:`TrainState`.

    With ``out_dir`` set, ``metrics.csv``, ``last.ckpt`` (every epoch) and
    ``best.ckpt`` (best eval accuracy) are written there.  ``state`` resumes
    a previous run; ``max_epochs`` stops early (after that many epochs of
    this call) without changing the schedule.
    """
    from .checkpoint import save_training_checkpoint

    cfg.validate()
    images, labels = train_data
    n = len(labels)
    if n == 0:
        raise ValueError("training set is empty")
    state = state if state is not None else TrainState(seed=seed)
    params = list(model.named_parameters())
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    metrics_path = os.path.join(out_dir, "metrics.csv") if out_dir else None
    if metrics_path and state.epoch == 0:
        os.makedirs(out_dir, exist_ok=True)
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_COLUMNS)

    prev_checks = set_finite_checks(False)
    try:
        done = 0
        while state.epoch < cfg.total_epochs and (max_epochs is None or done < max_epochs):
            epoch = state.epoch
            t0 = time.perf_counter()
            rng = _epoch_rng(state.seed, epoch)
            order = rng.permutation(n)
            flips = rng.random(n) < 0.5 if cfg.augment_flip else None
            model.train()
            loss_sum = 0.0
            correct = 0
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                xb = images[idx]
                if flips is not None:
                    xb = np.where(flips[idx, None, None, None], xb[..., ::-1], xb)
                t = epoch + b / steps_per_epoch if cfg.per_step_schedule else epoch
                lr = lr_schedule(t, cfg)
                state.lr_current = lr
                model.zero_grad()
                logits = model(Tensor(xb))
                loss = ops.cross_entropy(logits, labels[idx])
                lv = loss.item()
                if not math.isfinite(lv):
                    layer = find_first_nonfinite(model, xb)
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {state.step}; first non-finite output: {layer}",
                        layer,
                    )
                loss.backward()
                sgd_nesterov_step(params, state, lr, cfg.momentum, cfg.weight_decay, cfg.nesterov)
                state.step += 1
                loss_sum += lv * len(idx)
                correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
            eval_acc = evaluate_accuracy(model, eval_data) if eval_data is not None else float("nan")
            state.epoch += 1
            done += 1
            row = {
                "epoch": state.epoch,
                "lr": lr_schedule(epoch, cfg) if not cfg.per_step_schedule else state.lr_current,
                "train_loss": loss_sum / n,
                "train_acc": correct / n,
                "eval_acc": eval_acc,
                "wall_seconds": time.perf_counter() - t0,
            }
            state.history.append(row)
            if log is not None:
                log(
                    f"epoch {row['epoch']:3d} lr {row['lr']:.4f} loss {row['train_loss']:.4f} "
                    f"train_acc {row['train_acc']:.3f} eval_acc {row['eval_acc']:.3f} ({row['wall_seconds']:.1f}s)"
                )
            improved = eval_acc > state.best_eval_acc
            if improved:
                state.best_eval_acc = eval_acc
            if out_dir:
                with open(metrics_path, "a", newline="") as fh:
                    csv.writer(fh).writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])
                save_training_checkpoint(os.path.join(out_dir, "last.ckpt"), model, state, cfg)
                if improved:
                    save_training_checkpoint(os.path.join(out_dir, "best.ckpt"), model, state, cfg)
            for cb in callbacks:
                cb(state, model)
    finally:
        set_finite_checks(prev_checks)
    return state


def history_without_wall(history: list[dict]) -> list[dict]:
    """Metric history minus wall-clock timings, for determinism comparisons."""
    return [{k: v for k, v in row.items() if k != "wall_seconds"} for row in history]
