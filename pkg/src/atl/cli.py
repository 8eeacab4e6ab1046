"""Command-line entry point: ``atl <verb> ...``.

Exit codes: 0 ok, 2 configuration error, 3 teacher/student incompatibility,
4 training diverged.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from .checkpoint import load_checkpoint, model_from_checkpoint
from .data import load_dataset
from .diagnostics import divergence_profile
from .errors import AtlError, ConfigError
from .experiment import (RunStore, emit_report, load_config, run_config, sweep_configs)
from .studies import STUDENT_STEPS, TEACHER_STEPS, mechanism_study


def _parse_axis(text: str):
    name, sep, values = text.partition("=")
    if not sep:
        raise ConfigError(f"--axis expects name=v1,v2,..., got {text!r}")
    items = [v.strip() for v in values.split(",") if v.strip()]
    if name == "lambda":
        items = [float(v) for v in items]
    elif name == "layers":
        items = [v if ":" in v or v == "all" else [int(i) for i in v.split("+")] for v in items]
    return {name: items}


def _print_records(records) -> None:
    for rec in records:
        print(f"{rec.name}\tseed={rec.seed}\ttop1={rec.final_top1:.2f}\tfingerprint={rec.config_fingerprint}")


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "no_ema_eval", False):
        cfg = dataclasses.replace(cfg, ema_eval=False)
    return cfg


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    print(json.dumps({"fingerprint": cfg.fingerprint, **cfg.canonical()}, indent=1, sort_keys=True))
    return 0


def cmd_baseline(args) -> int:
    cfg = _load(args)
    if cfg.plan.method != "none":
        cfg = cfg.with_plan(method="none")
    records = run_config(cfg, RunStore(args.store), save_checkpoint_to=args.save_checkpoint)
    _print_records(records)
    return 0


def cmd_transfer(args) -> int:
    cfg = _load(args)
    if cfg.plan.method not in ("copy", "distill"):
        raise ConfigError(f"transfer needs plan.method copy or distill, got {cfg.plan.method!r}")
    records = run_config(cfg, RunStore(args.store), save_checkpoint_to=args.save_checkpoint)
    _print_records(records)
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    axis = {}
    for text in args.axis:
        axis.update(_parse_axis(text))
    if len(args.axis) != 1:
        raise ConfigError("sweeps take exactly one --axis")
    store = RunStore(args.store)
    for tag, point in sweep_configs(cfg, axis):
        _print_records(run_config(point, store, axis=tag))
    return 0


def cmd_diagnose(args) -> int:
    kind = args.kind.upper()
    if args.config:
        cfg = _load(args)
        cfg.diagnostics = kind
        records = run_config(cfg, RunStore(args.store))
        for rec in records:
            print(json.dumps({"seed": rec.seed, kind: rec.divergence[kind]["per_layer"]}))
        return 0
    if not (args.teacher and args.student):
        raise ConfigError("diagnose needs a config or both --teacher and --student checkpoints")
    teacher = model_from_checkpoint(load_checkpoint(args.teacher))
    student = model_from_checkpoint(load_checkpoint(args.student))
    _, eval_set = load_dataset(args.dataset, image_size=student.spec.image_size)
    profile = divergence_profile(teacher, student, eval_set.batches(256), kind, args.samples)
    sys.stdout.write(profile.to_csv())
    return 0


def cmd_report(args) -> int:
    sys.stdout.write(emit_report(args.store, args.query, args.format))
    return 0


def cmd_mechanism(args) -> int:
    report = mechanism_study(seeds=args.seeds, teacher_steps=args.teacher_steps,
                             student_steps=args.student_steps, workdir=args.workdir)
    print(json.dumps(report.summary(), indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atl", description="Attention transfer laboratory for ViTs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-config", help="check a config and print its fingerprint")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    for name, func, helptext in (("baseline", cmd_baseline, "no-transfer training"),
                                 ("transfer", cmd_transfer, "attention copy or distillation")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config")
        p.add_argument("--store", default="runs")
        p.add_argument("--save-checkpoint", default=None,
                       help="write the trained model; '{seed}' in the path is substituted")
        p.add_argument("--no-ema-eval", action="store_true", help="evaluate raw weights even when EMA is on")
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="single-axis sweep (lambda, layers, qkv or loss_kind)")
    p.add_argument("config")
    p.add_argument("--axis", action="append", required=True,
                   help="e.g. lambda=0,1,3  layers=top:1,top:3,bottom:3  qkv=Q,K,V,full")
    p.add_argument("--store", default="runs")
    p.add_argument("--no-ema-eval", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diagnose", help="per-layer teacher-to-student attention divergence")
    p.add_argument("config", nargs="?")
    p.add_argument("--kind", choices=["kl", "js", "KL", "JS"], default="kl")
    p.add_argument("--teacher")
    p.add_argument("--student")
    p.add_argument("--dataset", default="synthetic-shapes")
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--store", default="runs")
    p.add_argument("--no-ema-eval", action="store_true")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("report", help="render stored runs")
    p.add_argument("--store", default="runs")
    p.add_argument("--query", default=None, help="comma-separated key=value filters")
    p.add_argument("--format", choices=["table", "csv", "plotdata"], default="table")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("mechanism", help="desk-scale LayerScale teacher study (standard vs native student)")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--teacher-steps", type=int, default=TEACHER_STEPS)
    p.add_argument("--student-steps", type=int, default=STUDENT_STEPS)
    p.add_argument("--workdir", default=None)
    p.set_defaults(func=cmd_mechanism)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AtlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except yaml.YAMLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
