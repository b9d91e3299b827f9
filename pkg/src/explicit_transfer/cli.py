"""Command-line front end.

    explicit-transfer gen-toy    --config c.ini --out data/
    explicit-transfer train-base --config c.ini --out runs/
    explicit-transfer transfer   --config c.ini --out runs/ [--jobs N]
    explicit-transfer eval       --config c.ini --model runs/base_seed0.ckpt [--converter c.ckpt]
    explicit-transfer report     --out runs/
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, defaults_help, parse_config
from .data import generate_toy_lane_changes, write_sequence_dir
from .experiment import B_SEED_OFFSET, base_plan, converter_fn, make_task, run_experiment
from .models import Converter, Model, build_model, load_checkpoint, save_checkpoint
from .pipeline import train_full
from .report import emit_report, format_table, read_results_csv

log = logging.getLogger("explicit_transfer")


def _load(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "data", None):
        cfg.data_dir = args.data
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def _base_path(out_dir, seed: int) -> Path:
    return Path(out_dir) / f"base_seed{seed}.ckpt"


def cmd_gen_toy(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir)
    for seed in cfg.seeds:
        root = out if len(cfg.seeds) == 1 else out / f"seed{seed}"
        a = generate_toy_lane_changes(cfg.toy, "clean", cfg.n_a, seed)
        b = generate_toy_lane_changes(cfg.toy, "noisy", cfg.n_b, seed + B_SEED_OFFSET)
        write_sequence_dir(root / "A", a)
        write_sequence_dir(root / "B", b)
        print(f"wrote {len(a)} clean and {len(b)} noisy sequences to {root}")
    return 0


def cmd_train_base(args) -> int:
    cfg = _load(args)
    task = make_task(cfg)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        a_train, a_test, _, b_test = task.load(seed)
        model = build_model(task.model_spec(a_train), seed)
        train_full(model, task.arrays(a_train), base_plan(cfg, seed), cfg.base_epochs)
        path = _base_path(cfg.out_dir, seed)
        save_checkpoint(path, model)
        ident = converter_fn(None)
        summary = {k: v for k, v in task.evaluate(model, ident, a_test).items() if k != "report"}
        print(f"seed {seed}: saved {path}; A on A {json.dumps(summary, sort_keys=True)}")
    return 0


def cmd_transfer(args) -> int:
    cfg = _load(args)
    base_states = {}
    for seed in cfg.seeds:
        path = _base_path(cfg.out_dir, seed)
        if path.exists():
            net = load_checkpoint(path)
            if not isinstance(net, Model):
                raise ValueError(f"{path} is not a base model checkpoint")
            base_states[seed] = net.state()
            log.info("reusing base model %s", path)
    report = run_experiment(cfg, jobs=args.jobs, base_states=base_states)
    paths = emit_report(report, cfg.out_dir)
    for p in paths:
        print(f"wrote {p}")
    if report.failures:
        for seed, method, b, err in report.failures:
            print(f"grid point failed: seed={seed} method={method} b={b}: {err}", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    task = make_task(cfg)
    model = load_checkpoint(args.model)
    if not isinstance(model, Model):
        raise ValueError(f"{args.model} is not a model checkpoint")
    converter = None
    if args.converter:
        converter = load_checkpoint(args.converter)
        if not isinstance(converter, Converter):
            raise ValueError(f"{args.converter} is not a converter checkpoint")
    out = {}
    for seed in cfg.seeds:
        _, a_test, _, b_test = task.load(seed)
        split = a_test if args.domain == "A" else b_test
        metrics = task.evaluate(model, converter_fn(converter), split)
        out[str(seed)] = {k: v for k, v in metrics.items() if k != "report"}
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    out = Path(args.out or "out")
    rows = read_results_csv(out / "results.csv")
    table = format_table(rows)
    (out / "report.md").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="explicit-transfer",
        description="Transfer learning with explicit per-sample transformation matrices.",
        epilog="configuration keys and defaults:\n" + defaults_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs=False):
        p.add_argument("--config", help="experiment configuration file")
        p.add_argument("--seed", type=int, help="single seed overriding [experiment] seeds")
        p.add_argument("--out", help="output directory overriding [output] out_dir")
        p.add_argument("--data", help="data directory overriding [data] data_dir")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="grid points run in parallel (default 1)")

    common(sub.add_parser("gen-toy", help="write clean (A) and noisy (B) toy sequences as CSV files"))
    common(sub.add_parser("train-base", help="train and save the domain-A base model"))
    common(sub.add_parser("transfer", help="run the experiment grid and write reports"), jobs=True)
    p = sub.add_parser("eval", help="evaluate a saved model (and converter) on a test split")
    common(p)
    p.add_argument("--model", required=True, help="base model checkpoint")
    p.add_argument("--converter", help="converter checkpoint applied before the model")
    p.add_argument("--domain", choices=("A", "B"), default="B", help="test split to evaluate (default B)")
    p = sub.add_parser("report", help="print results.csv of --out as a Markdown table")
    p.add_argument("--out", help="directory containing results.csv (default out)")
    return parser


COMMANDS = {"gen-toy": cmd_gen_toy, "train-base": cmd_train_base, "transfer": cmd_transfer,
            "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
