"""Command-line surface: train, eval, gradcheck, visualize.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numerical
abort during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from . import __version__
from .config import RunConfig
from .checkpoint import load_checkpoint
from .data import build_dataset
from .errors import ConfigError, TrainingAbort
from .evaluate import evaluate_model
from .gradcheck import run_all, write_report
from .trainer import Trainer, TripletState
from .viz import render_augmentation_grid

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        config.train = dataclasses.replace(config.train, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        config.train = dataclasses.replace(config.train, epochs=args.epochs)
    if getattr(args, "out", None) is not None:
        config.train = dataclasses.replace(config.train, out_dir=args.out)
    config.validate()
    return config


def cmd_train(args) -> int:
    config = _load_config(args)
    dataset = build_dataset(config.dataset)
    out_dir = Path(config.train.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": config.to_dict(),
        "seed": config.train.seed,
        "code_version": __version__,
        "dataset_fingerprint": dataset.fingerprint,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    state = TripletState(config)
    trainer = Trainer(state, dataset.train_images, dataset.train_labels, out_dir=out_dir)
    try:
        history = trainer.fit(resume_from=args.checkpoint)
    except TrainingAbort as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"trained {len(history)} steps over {config.train.epochs} epochs; "
          f"outputs in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load_config(args)
    dataset = build_dataset(config.dataset)
    state = TripletState(config)
    try:
        load_checkpoint(args.checkpoint, state)
    except (ValueError, FileNotFoundError) as e:
        raise ConfigError(f"cannot load checkpoint: {e}")
    images = dataset.train_images if args.split == "train" else dataset.test_images
    labels = dataset.train_labels if args.split == "train" else dataset.test_labels
    metrics = evaluate_model(state.target, images, labels, state.task, dataset.num_classes)
    metrics["split"] = args.split
    metrics["n_samples"] = int(len(labels))
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(seed=args.seed or 0, threshold=args.threshold)
    if args.report:
        write_report(results, args.report)
    worst = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.name:28s} max_rel_err={r.max_rel_err:.3e} "
              f"(checked {r.n_checked}, excluded {r.n_excluded}, threshold {r.threshold:g})")
        worst = max(worst, 0 if r.passed else 1)
    return EXIT_OK if worst == 0 else EXIT_CHECK_FAILED


def cmd_visualize(args) -> int:
    epochs = [int(e) for e in args.epochs.split(",") if e.strip() != ""]
    if not epochs:
        raise ConfigError("no epochs given; use e.g. --epochs 0,5,10")
    path = render_augmentation_grid(args.run_dir, epochs, out_path=args.out)
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advaug",
        description="Adversarially trained data augmentation: train, evaluate, audit, visualize.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the joint optimization loop")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    p.add_argument("--out", default=None, help="override train.out_dir")
    p.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (main BN group only)")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all differentiable ops")
    p.add_argument("--threshold", type=float, default=None,
                   help="force one global threshold instead of per-op defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default="gradcheck_report.csv")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("visualize", help="render an augmentation grid across epochs")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--epochs", required=True, help="comma-separated epoch list, e.g. 0,5,10")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAbort as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
