"""Command-line entry points.

    hopbev generate --config cfg.json --out data/ [--seed S]
    hopbev train    --config cfg.json --data data/ --out run/ [--resume]
    hopbev eval     --checkpoint ckpt --data data/ --report out.json [--plots] [--csv]
    hopbev ablate   --suite NAME|path --base-config cfg.json --data data/ --out dir/
    hopbev report   --runs dir [dir ...] --format {md,csv} [--out dir]

All commands exit 0 on success and nonzero with a machine-readable error
JSON on stderr on failure. Generated tables come with matplotlib figures
when an output directory is given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import ablation, plots
from .config import RunConfig
from .errors import ConfigError
from .metrics import eval_result_csv
from .synthworld import NoiseConfig, generate_dataset, read_dataset
from .train import apply_thread_cap, evaluate_model, load_checkpoint, run_training


def _error_json(exc) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc)})


def cmd_generate(args):
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides({"seed": args.seed})
    manifest = generate_dataset(cfg.seed, cfg.world(), cfg.grid(), args.out)
    cfg.dump(os.path.join(args.out, "config.json"))
    print(json.dumps({"out": args.out, "n_sequences": manifest["n_sequences"]}))
    return 0


def cmd_train(args):
    cfg = RunConfig.from_file(args.config)
    summary = run_training(cfg, args.data, args.out, resume=args.resume, quiet=False)
    print(json.dumps({"out": args.out, "final": summary["final"], "seconds": summary["seconds"]}))
    return 0


def cmd_eval(args):
    model, meta = load_checkpoint(args.checkpoint, include_aux=False)
    model.eval()
    cfg = RunConfig.from_dict(meta["config"])
    _, seqs = read_dataset(args.data)
    holdout = cfg.train["eval_holdout"]
    eval_seqs = seqs[-holdout:] if len(seqs) > holdout else seqs
    noise = NoiseConfig(dropout=cfg.doc["world"]["dropout"], seed=cfg.seed)
    result = evaluate_model(model, eval_seqs, noise=noise)
    report = {
        "checkpoint": args.checkpoint,
        "step": meta["step"],
        "config": cfg.to_dict(),
        **result.to_dict(),
    }
    with open(args.report, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
    if args.csv:
        with open(os.path.splitext(args.report)[0] + ".csv", "w", encoding="utf-8") as f:
            f.write(eval_result_csv(result))
    if args.plots:
        plots.plot_pr_curves(result.pr_curves, os.path.splitext(args.report)[0] + ".pr.png")
    print(json.dumps({"report": args.report, "mAP": result.mAP, "composite": result.composite}))
    return 0


def cmd_ablate(args):
    suite = ablation.load_suite(args.suite)
    base = RunConfig.from_file(args.base_config)
    records, table = ablation.run_suite(suite, base, args.data, args.out)
    plots.plot_metric_bars(table, os.path.join(args.out, "metrics.png"))
    run_dirs = [r["run_dir"] for rec in records for r in rec["runs"] if r.get("ok")]
    if run_dirs:
        plots.plot_loss_curves(run_dirs, os.path.join(args.out, "loss_curves.png"))
    failed = [(rec["name"], r["seed"]) for rec in records for r in rec["runs"] if not r.get("ok")]
    print(json.dumps({"out": args.out, "cells": [r["name"] for r in records], "failed": failed}))
    return 0


def cmd_report(args):
    rows = ablation.report_rows_from_runs(args.runs)
    text = ablation.format_table(rows, args.format)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        ext = "md" if args.format == "md" else "csv"
        with open(os.path.join(args.out, f"report.{ext}"), "w", encoding="utf-8") as f:
            f.write(text)
        plots.plot_metric_bars(rows, os.path.join(args.out, "report.png"))
        plots.plot_loss_curves(args.runs, os.path.join(args.out, "loss_curves.png"))
    sys.stdout.write(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="hopbev", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a detector from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's holdout")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--plots", action="store_true")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", required=True)
    p.add_argument("--base-config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="comparison table (mean ± stdev over seeds)")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--format", choices=("md", "csv"), default="md")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse already printed the usage error; keep its exit code.
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, IOError, ValueError, RuntimeError) as e:
        sys.stderr.write(_error_json(e) + "\n")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
