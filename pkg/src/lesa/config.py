"""Experiment configuration as plain ``section.key = value`` lines.

Blank lines and ``#`` comments are ignored.  Keys not listed in the tables
below are rejected, so a typo fails loudly instead of silently falling
back to a default.  Example::

    model.op_per_stage = conv,conv,lesa,lesa
    model.base_channels = 16
    optim.total_epochs = 20
    data.source = synthetic
    run.out_dir = runs/lesa
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

from .model import BackboneSpec, SpecError
from .trainer import OptimConfig

__all__ = [
    "ConfigError",
    "DataConfig",
    "RunConfig",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "SEED_ENV",
]

SEED_ENV = "LESA_SEED"


class ConfigError(ValueError):
    """Malformed, inconsistent or incomplete configuration."""


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | tensor-dir
    path: str = ""
    num_classes: int = 10
    image_size: int = 32
    train_count: int = 5000
    eval_count: int = 1000
    seed: int = 0


@dataclass
class RunConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True


@dataclass
class ExperimentConfig:
    model: BackboneSpec = field(default_factory=BackboneSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_text(self) -> str:
        """Canonical form: every key, sorted, with normalized values."""
        lines = []
        for section in ("data", "model", "optim", "run"):
            obj = getattr(self, section)
            for f in sorted(fields(obj), key=lambda f: f.name):
                lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name), f.name)}")
        return "\n".join(lines) + "\n"


def _format(value, name: str) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if name == "stage_blocks":
        return ",".join(str(v) for v in value)
    if name == "op_per_stage":
        return ",".join(value[k] for k in sorted(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _converter(obj, name: str):
    if name == "stage_blocks":
        return lambda s: [int(v) for v in s.split(",")]
    if name == "op_per_stage":
        return lambda s: {i + 1: v.strip() for i, v in enumerate(s.split(","))}
    default = getattr(obj, name)
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def parse_config(text: str, base_dir: str | None = None, check_paths: bool = True) -> ExperimentConfig:
    """Parse config text; relative ``data.path`` is resolved against ``base_dir``."""
    cfg = ExperimentConfig()
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        obj = getattr(cfg, section, None) if section in ("model", "optim", "data", "run") else None
        if obj is None or name not in {f.name for f in fields(obj)}:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            setattr(obj, name, _converter(obj, name)(value))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    cfg.model = BackboneSpec(**{f.name: getattr(cfg.model, f.name) for f in fields(cfg.model)})
    if cfg.data.path and base_dir is not None and not os.path.isabs(cfg.data.path):
        cfg.data.path = os.path.normpath(os.path.join(base_dir, cfg.data.path))
    _validate(cfg, seen, check_paths)
    return cfg


def _validate(cfg: ExperimentConfig, seen: set[str], check_paths: bool) -> None:
    try:
        cfg.model.validate()
        cfg.optim.validate()
    except (SpecError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.data.source not in ("synthetic", "tensor-dir"):
        raise ConfigError(f"data.source must be 'synthetic' or 'tensor-dir', got {cfg.data.source!r}")
    # the data section is authoritative for class count and image size
    for dkey, mkey in (("num_classes", "num_classes"), ("image_size", "input_size")):
        dval, mval = getattr(cfg.data, dkey), getattr(cfg.model, mkey)
        if dval != mval:
            if f"model.{mkey}" in seen:
                raise ConfigError(f"data.{dkey}={dval} disagrees with model.{mkey}={mval}")
            setattr(cfg.model, mkey, dval)
    try:
        cfg.model.validate()
    except SpecError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.data.source == "tensor-dir":
        if not cfg.data.path:
            raise ConfigError("data.source = tensor-dir requires data.path")
        if check_paths and not os.path.isdir(cfg.data.path):
            raise ConfigError(f"data.path does not exist: {cfg.data.path}")


def load_config(path: str, env: dict | None = None) -> ExperimentConfig:
    """Read ``path``; the ``LESA_SEED`` environment variable overrides ``run.seed``."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        text = fh.read()
    cfg = parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.run.seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    return cfg
