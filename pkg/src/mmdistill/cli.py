"""Command-line entry point.

    mmdistill scene gen     --config C --seeds 0..9 --out data.bin
    mmdistill train teacher --config C --out DIR
    mmdistill train student --config C --teacher DIR/teacher.ckpt --out DIR
    mmdistill eval          --config C --ckpt FILE --modality student --out metrics.json
    mmdistill ablate        --config C --teacher FILE --out ablation.csv
    mmdistill flops         --voxels 7718,984 --channels 256

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from . import detector as D
from .config import ConfigError, RunConfig, default_config, load_config, save_config
from .scene import DatasetFormatError, generate_dataset, load_dataset, save_dataset
from .train import (
    ABLATION_COMBOS, NumericFailure, ablation_csv, benchmark_split, evaluate_model, flops_report,
    loss_trace_csv, run_ablation, train_student, train_teacher,
)

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("mmdistill")


def parse_seed_range(text: str) -> List[int]:
    """'a..b' (inclusive) or a single integer."""
    try:
        if ".." in text:
            lo, hi = (int(p) for p in text.split("..", 1))
        else:
            lo = hi = int(text)
    except ValueError as exc:
        raise ConfigError(f"bad seed range {text!r}, expected a..b") from exc
    if lo < 0 or hi < lo:
        raise ConfigError(f"bad seed range {text!r}, expected 0 <= a <= b")
    return list(range(lo, hi + 1))


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    train = cfg.train
    if getattr(args, "seed", None) is not None:
        train = replace(train, seed=args.seed)
    if getattr(args, "steps", None) is not None:
        train = replace(train, steps=args.steps, teacher_steps=args.steps)
    return replace(cfg, train=train).validate()


def _datasets(cfg: RunConfig, args):
    if getattr(args, "data", None):
        scenes = load_dataset(args.data)
        n_tr = min(cfg.train.train_scenes, len(scenes))
        return scenes[:n_tr], scenes[n_tr:]
    return benchmark_split(cfg)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------- verbs
def cmd_scene_gen(args) -> int:
    cfg = _load_run_config(args)
    seeds = parse_seed_range(args.seeds)
    scenes = generate_dataset(cfg.scene, seeds)
    save_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _load_run_config(args)
    train, _ = _datasets(cfg, args)
    params, trace = train_teacher(cfg, train)
    out = _out_dir(args, cfg)
    D.save_params(params, out / "teacher.ckpt")
    (out / "teacher_loss.csv").write_text(loss_trace_csv(trace))
    save_config(cfg, out / "config.ini")
    print(f"teacher checkpoint: {out / 'teacher.ckpt'}")
    return EXIT_OK


def cmd_train_student(args) -> int:
    cfg = _load_run_config(args)
    teacher = D.load_params(args.teacher)
    train, held_out = _datasets(cfg, args)
    params, trace = train_student(cfg, train, teacher)
    out = _out_dir(args, cfg)
    D.save_params(params, out / "student.ckpt")
    (out / "student_loss.csv").write_text(loss_trace_csv(trace))
    save_config(cfg, out / "config.ini")
    if held_out:
        report = evaluate_model(params, held_out, "student", cfg)
        (out / "metrics.json").write_text(report.to_json() + "\n")
        print(f"student mAP-lite {report.map:.4f} NDS-lite {report.nds_lite:.4f}")
    print(f"student checkpoint: {out / 'student.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    params = D.load_params(args.ckpt)
    _, held_out = _datasets(cfg, args)
    if not held_out:
        raise ConfigError("no evaluation scenes (eval_scenes = 0)")
    report = evaluate_model(params, held_out, args.modality, cfg)
    text = report.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    teacher = D.load_params(args.teacher)
    train, held_out = _datasets(cfg, args)
    if not held_out:
        raise ConfigError("no evaluation scenes (eval_scenes = 0)")
    combos = ABLATION_COMBOS if args.rows == "all" else ABLATION_COMBOS[:1]
    rows = run_ablation(cfg, train, held_out, teacher, combos)
    text = ablation_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_flops(args) -> int:
    try:
        voxels = [int(v) for v in args.voxels.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --voxels {args.voxels!r}") from exc
    rows = flops_report(voxels, args.channels)
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=["voxels", "channels", "flops_cons", "flops_rel"], lineterminator="\n")
    wr.writeheader()
    wr.writerows(rows)
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmdistill", description="Multi-modality to LiDAR-only detector distillation")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_help="output path"):
        sp.add_argument("--config", help="INI config file (defaults built in)")
        sp.add_argument("--seed", type=int, help="override train.seed")
        sp.add_argument("--out", help=out_help)

    scene = sub.add_parser("scene", help="synthetic scenes").add_subparsers(dest="action", required=True)
    gen = scene.add_parser("gen", help="generate a dataset file")
    common(gen, "dataset file to write")
    gen.add_argument("--seeds", required=True, help="inclusive seed range a..b")
    gen.set_defaults(func=cmd_scene_gen)

    train = sub.add_parser("train", help="train a model").add_subparsers(dest="action", required=True)
    t = train.add_parser("teacher", help="supervised teacher on painted scenes")
    common(t, "output directory")
    t.add_argument("--data", help="dataset file (default: generate the benchmark split)")
    t.add_argument("--steps", type=int, help="override the step count")
    t.set_defaults(func=cmd_train_teacher)
    s = train.add_parser("student", help="distill the LiDAR-only student")
    common(s, "output directory")
    s.add_argument("--teacher", required=True, help="teacher checkpoint")
    s.add_argument("--data", help="dataset file (default: generate the benchmark split)")
    s.add_argument("--steps", type=int, help="override the step count")
    s.set_defaults(func=cmd_train_student)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    common(e, "metrics JSON to write")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--modality", choices=("student", "teacher"), default="student")
    e.add_argument("--data")
    e.add_argument("--csv", help="also write per-class AP as CSV")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train one student per distillation-level combination")
    common(a, "ablation CSV to write")
    a.add_argument("--teacher", required=True)
    a.add_argument("--data")
    a.add_argument("--steps", type=int)
    a.add_argument("--rows", choices=("all", "baseline"), default="all")
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("flops", help="analytical FLOPs of the voxel losses")
    f.add_argument("--voxels", default="7718,984", help="comma-separated active voxel counts")
    f.add_argument("--channels", type=int, default=256)
    f.add_argument("--out")
    f.set_defaults(func=cmd_flops)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
