"""``lesa`` command-line entry point.

stdout carries machine-readable output only (JSON, CSV or TSV); progress
and diagnostics go to stderr.  Exit codes: 0 ok, 2 configuration error,
3 numeric failure (NaN, failed gradcheck), 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _err(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _single_thread(enabled: bool):
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def _load_data(cfg):
    from .data import generate_splits, load_dataset_dir

    if cfg.data.source == "synthetic":
        train, evals = generate_splits(
            cfg.data.num_classes, cfg.data.train_count, cfg.data.eval_count, cfg.data.image_size, cfg.data.seed
        )
    else:
        train, evals = load_dataset_dir(cfg.data.path)
    from .config import ConfigError

    for name, split in (("train", train), ("eval", evals)):
        if len(split) == 0:
            raise ConfigError(f"{name} split is empty")
        expected = (cfg.model.in_channels, cfg.model.input_size, cfg.model.input_size)
        if split.images.shape[1:] != expected:
            raise ConfigError(f"{name} images have shape {split.images.shape[1:]}, model expects {expected}")
        if split.labels.min() < 0 or split.labels.max() >= cfg.model.num_classes:
            raise ConfigError(f"{name} labels fall outside [0, {cfg.model.num_classes})")
    return train, evals


# -- commands ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import generate_splits, save_split

    train, evals = generate_splits(args.classes, args.count, args.eval_count, args.size, args.seed)
    save_split(os.path.join(args.out, "train"), train)
    save_split(os.path.join(args.out, "eval"), evals)
    _emit({"out": args.out, "train_count": len(train), "eval_count": len(evals), "classes": args.classes, "size": args.size})
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import checkpoint_load
    from .config import load_config
    from .model import build_backbone
    from .trainer import train

    cfg = load_config(args.config)
    with _single_thread(cfg.run.deterministic):
        train_set, eval_set = _load_data(cfg)
        out_dir = cfg.run.out_dir
        state = None
        if args.resume:
            model, state, saved_optim = checkpoint_load(os.path.join(out_dir, "last.ckpt"), expected=cfg.model)
            if state is None:
                raise ValueError("checkpoint carries no optimizer state; cannot resume")
            _err(f"resuming from epoch {state.epoch}")
        else:
            model = build_backbone(cfg.model, seed=cfg.run.seed)
        state = train(
            model,
            train_set.as_tuple(),
            eval_set.as_tuple(),
            cfg.optim,
            seed=cfg.run.seed,
            state=state,
            out_dir=out_dir,
            max_epochs=args.max_epochs,
            log=_err,
        )
    last = state.history[-1] if state.history else {}
    _emit(
        {
            "epoch": state.epoch,
            "step": state.step,
            "train_loss": last.get("train_loss"),
            "train_acc": last.get("train_acc"),
            "eval_acc": last.get("eval_acc"),
            "best_eval_acc": state.best_eval_acc,
            "last_checkpoint": os.path.join(out_dir, "last.ckpt"),
            "best_checkpoint": os.path.join(out_dir, "best.ckpt"),
            "metrics": os.path.join(out_dir, "metrics.csv"),
        }
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import checkpoint_load
    from .config import load_config
    from .instrument import evaluate_accuracy

    cfg = load_config(args.config)
    with _single_thread(cfg.run.deterministic):
        model, _, _ = checkpoint_load(args.ckpt, expected=cfg.model)
        _, eval_set = _load_data(cfg)
        acc = evaluate_accuracy(model, eval_set.as_tuple())
    _emit({"accuracy": acc, "samples": len(eval_set), "checkpoint": args.ckpt})
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .checkpoint import checkpoint_load
    from .config import load_config
    from .instrument import run_unary_ablation, run_weight_tracking

    cfg = load_config(args.config)
    with _single_thread(cfg.run.deterministic):
        model, _, _ = checkpoint_load(args.ckpt, expected=cfg.model)
        train_set, eval_set = _load_data(cfg)
        data = (train_set if args.split == "train" else eval_set).as_tuple()
        report = run_weight_tracking(model, data, max_batches=args.max_batches)
        ablation = run_unary_ablation(model, data, renormalize=args.renormalize) if args.ablate_unary else None
    summary = json.loads(report.to_json())
    summary["split"] = args.split
    if ablation is not None:
        summary["ablation"] = {
            "baseline_accuracy": ablation.baseline_accuracy,
            "ablated_accuracy": ablation.ablated_accuracy,
            "residual_weight_pct": ablation.residual_weight_pct,
            "renormalize": ablation.renormalize,
            "sample_count": ablation.sample_count,
        }
    if args.out:
        from .io import atomic_write

        os.makedirs(args.out, exist_ok=True)
        atomic_write(os.path.join(args.out, "weights.csv"), report.to_csv().encode())
        atomic_write(os.path.join(args.out, "summary.json"), json.dumps(summary, indent=2, sort_keys=True).encode())
    if args.format == "csv":
        sys.stdout.write(report.to_csv())
    else:
        _emit(summary)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    with _single_thread(True):
        results = run_gradcheck(args.module or None, instances=args.instances, seed=args.seed, tolerance=args.tolerance)
    print("op\tinstances\tmax_rel_error\tstatus")
    for r in results:
        print(f"{r.name}\t{r.instances}\t{r.max_rel_error:.3e}\t{'pass' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        _err(f"gradcheck failed for: {', '.join(failed)}")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_dump_maps(args) -> int:
    from .checkpoint import checkpoint_load
    from .instrument import export_contribution_maps
    from .io import read_tensor

    model, _, _ = checkpoint_load(args.ckpt)
    images = read_tensor(args.image)
    if images.ndim == 4:
        if not 0 <= args.index < len(images):
            raise ValueError(f"--index {args.index} out of range for {len(images)} images")
        image = images[args.index]
    elif images.ndim == 3:
        image = images
    else:
        raise ValueError(f"{args.image}: expected a C×H×W or N×C×H×W tensor, got rank {images.ndim}")
    paths = export_contribution_maps(model, image, args.out)
    _emit({"files": paths})
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesa", description="Local/context attention experiments on a numpy autograd core.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a seeded synthetic dataset (train/ and eval/ splits)")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--count", type=int, default=5000, help="training images")
    p.add_argument("--eval-count", type=int, default=1000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a backbone from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true", help="continue from <out_dir>/last.ckpt")
    p.add_argument("--max-epochs", type=int, default=None, help="stop after this many epochs (schedule unchanged)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluation accuracy of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="unary/binary weight shares per layer, optional unary ablation")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ablate-unary", action="store_true")
    p.add_argument("--renormalize", action="store_true", help="renormalize the softmax after dropping the unary term")
    p.add_argument("--split", choices=("eval", "train"), default="eval")
    p.add_argument("--max-batches", type=int, default=None)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", default=None, help="also write weights.csv and summary.json here")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", action="append", help="registry entry to check (repeatable); default all")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-maps", help="write per-layer contribution tensors for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="LTEN file holding C×H×W or N×C×H×W images")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_maps)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .config import ConfigError
    from .io import FormatError
    from .tensor import NumericError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except NumericError as exc:
        _err(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        _err(f"I/O error: {exc}")
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        _err(f"error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
