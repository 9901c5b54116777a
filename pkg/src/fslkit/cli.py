"""Command-line interface: data generation, the three training stages,
evaluation, gradient checking, and checkpoint inspection.

Exit codes: 0 on success, 1 on runtime failure (I/O, capacity, bad
files), 2 on usage errors. Every subcommand is deterministic given its
arguments, config file, input files, and seed, and writes only under its
``--out`` directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .checksuite import default_suite
from .data import generate_synthetic, load_dataset
from .errors import CapacityError, ConfigError, FormatError, ShapeError, StateError
from .pipeline import (
    TrainConfig,
    evaluate,
    finetune_stage,
    train_backbone_stage,
    train_joint_stage,
)

_STAGE_RUNNERS = {
    "train-backbone": ("backbone", train_backbone_stage),
    "train-joint": ("joint", train_joint_stage),
    "finetune": ("finetune", finetune_stage),
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--out", type=Path, help="output directory")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    _add_common(parser)
    parser.add_argument("--data", type=Path, required=True, help="dataset manifest")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--no-mar", action="store_true", default=None,
                        help="bypass the learnable resizer (plain bilinear)")
    parser.add_argument("--frozen-metric", action="store_true", default=None,
                        help="keep the similarity-fusion weights fixed")
    parser.add_argument("--mar-input-size", type=int,
                        help="pre-scale images to this size before the resizer")
    parser.add_argument("--way", type=int)
    parser.add_argument("--shot", type=int)
    parser.add_argument("--query", type=int)
    parser.add_argument("--episodes", type=int, help="training episodes per epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fslkit",
        description="Few-shot classification with a learnable resizer and an "
                    "adaptive similarity metric.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic aliasing-pair dataset")
    _add_common(p)
    p.add_argument("--classes", type=int, default=40)
    p.add_argument("--samples-per-class", type=int, default=20)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--noise-sigma", type=float, default=0.05)

    p = sub.add_parser("train-backbone", help="stage 1: classification pretraining")
    _add_train_flags(p)

    p = sub.add_parser("train-joint", help="stage 2: resizer + backbone training")
    _add_train_flags(p)
    p.add_argument("--base", type=Path, required=True, help="stage-1 checkpoint")

    p = sub.add_parser("finetune", help="stage 3: episodic meta fine-tuning")
    _add_train_flags(p)
    p.add_argument("--base", type=Path, required=True, help="stage-2 checkpoint")

    p = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=1)
    p.add_argument("--query", type=int, default=15)
    p.add_argument("--episodes", type=int, default=600)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inspect", help="dump checkpoint metadata")
    p.add_argument("--checkpoint", type=Path, required=True)

    return parser


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return doc


def _out_dir(args) -> Path:
    out = args.out if args.out is not None else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_train(args) -> int:
    stage, runner = _STAGE_RUNNERS[args.command]
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "no_mar": args.no_mar,
        "frozen_metric": args.frozen_metric,
        "mar_input_size": args.mar_input_size,
        "way": args.way,
        "shot": args.shot,
        "query": args.query,
        "episodes_per_epoch": args.episodes,
    }
    config = TrainConfig.from_dict(_load_config_file(args.config), stage=stage, **overrides)
    data = load_dataset(args.data)
    out = _out_dir(args)
    log_path = out / "run_log.jsonl"
    if stage == "backbone":
        ckpt, _ = runner(config, data, log_path=log_path)
    else:
        base = load_checkpoint(args.base)
        ckpt, _ = runner(config, data, base, log_path=log_path)
    ckpt_path = out / f"{stage}.ckpt"
    save_checkpoint(ckpt, ckpt_path)
    print(f"stage={stage} best_val_acc={ckpt.val_accuracy:.2f} "
          f"epoch={ckpt.epoch} checkpoint={ckpt_path}")
    return 0


def _run_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    seed = args.seed if args.seed is not None else 0
    mean, half = evaluate(ckpt, data, args.split, args.way, args.shot, args.query,
                          args.episodes, seed)
    print(f"acc={mean:.2f} ci95={half:.2f} episodes={args.episodes}")
    out = _out_dir(args)
    report = {
        "checkpoint": str(args.checkpoint),
        "data": str(args.data),
        "split": args.split,
        "way": args.way,
        "shot": args.shot,
        "query": args.query,
        "episodes": args.episodes,
        "seed": seed,
        "accuracy_mean": mean,
        "ci95_half_width": half,
    }
    with open(out / "eval_report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return 0


def _run_gradcheck(args) -> int:
    entries = default_suite(seed=args.seed)
    width = max(len(e.op) for e in entries)
    for e in entries:
        status = "pass" if e.passed else "FAIL"
        print(f"{e.op:<{width}}  max_rel_err={e.max_rel_error:.3e}  "
              f"params={e.checked_params}  {status}")
    if all(e.passed for e in entries):
        print("all gradient checks passed")
        return 0
    print("gradient checks FAILED", file=sys.stderr)
    return 1


def _run_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    print(f"stage={ckpt.stage} version={ckpt.version} seed={ckpt.seed} "
          f"epoch={ckpt.epoch} val_accuracy={ckpt.val_accuracy:.4f}")
    euclid = float(ckpt.blocks["metric.euclid_weight"])
    cosine = float(ckpt.blocks["metric.cosine_weight"])
    print(f"metric: euclid_weight={euclid:.6g} cosine_weight={cosine:.6g}")
    for name, array in ckpt.blocks.items():
        print(f"  {name}: shape={tuple(array.shape)}")
    return 0


def _run_gen_data(args) -> int:
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else 0
    manifest = generate_synthetic(
        out,
        num_classes=args.classes,
        samples_per_class=args.samples_per_class,
        image_size=args.image_size,
        noise_sigma=args.noise_sigma,
        seed=seed,
    )
    print(f"manifest={manifest}")
    return 0


def run_cli(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "gen-data":
            return _run_gen_data(args)
        if args.command in _STAGE_RUNNERS:
            return _run_train(args)
        if args.command == "eval":
            return _run_eval(args)
        if args.command == "gradcheck":
            return _run_gradcheck(args)
        if args.command == "inspect":
            return _run_inspect(args)
    except (ConfigError, FormatError, CapacityError, ShapeError, StateError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"error: unknown command {args.command!r}", file=sys.stderr)
    return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
