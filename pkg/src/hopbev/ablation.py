"""Ablation suites as data: named config deltas over a base config, run per
seed, aggregated into a comparison table.

A suite JSON looks like::

    {
      "name": "temporal_decoder",
      "seeds": [0, 1, 2],
      "declared_keys": ["hop.use_short_term", "hop.use_long_term"],
      "cells": [{"name": "short_only", "overrides": {"hop.use_long_term": false}}, ...]
    }

Cell overrides may touch only the declared keys. Each (cell, seed) trains in
its own run directory; failures are recorded per cell without aborting the
suite.
"""

from __future__ import annotations

import json
import os
import statistics
import traceback
from importlib import resources

from .config import RunConfig
from .errors import ConfigError
from .train import run_training

TABLE_COLUMNS = ("mAP", "ATE", "AOE", "AVE", "composite")


def load_suite(name_or_path) -> dict:
    if os.path.exists(name_or_path):
        with open(name_or_path, "r", encoding="utf-8") as f:
            suite = json.load(f)
    else:
        ref = resources.files("hopbev.suites").joinpath(f"{name_or_path}.json")
        if not ref.is_file():
            raise ConfigError(f"unknown suite {name_or_path!r} (no file and no builtin)")
        with ref.open("r") as f:
            suite = json.load(f)
    for key in ("name", "seeds", "cells"):
        if key not in suite:
            raise ConfigError(f"suite is missing {key!r}")
    declared = set(suite.get("declared_keys", []))
    for cell in suite["cells"]:
        extra = set(cell.get("overrides", {})) - declared
        if extra:
            raise ConfigError(f"cell {cell['name']!r} touches undeclared keys: {sorted(extra)}")
    return suite


def run_suite(suite: dict, base_cfg: RunConfig, data_path, out_dir, quiet=True):
    """Train every (cell, seed) and aggregate final eval metrics."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for cell in suite["cells"]:
        cell_record = {"name": cell["name"], "overrides": cell.get("overrides", {}), "runs": []}
        for seed in suite["seeds"]:
            run_dir = os.path.join(out_dir, f"{cell['name']}_seed{seed}")
            try:
                cfg = base_cfg.with_overrides({**cell.get("overrides", {}), "seed": seed})
                summary = run_training(cfg, data_path, run_dir, quiet=quiet)
                cell_record["runs"].append(
                    {"seed": seed, "run_dir": run_dir, "final": summary["final"], "ok": True}
                )
            except Exception as e:  # recorded, not fatal for the suite
                cell_record["runs"].append(
                    {
                        "seed": seed,
                        "run_dir": run_dir,
                        "ok": False,
                        "error": f"{type(e).__name__}: {e}",
                        "traceback": traceback.format_exc(),
                    }
                )
        records.append(cell_record)
    table = aggregate_table(records)
    with open(os.path.join(out_dir, "suite_results.json"), "w", encoding="utf-8") as f:
        json.dump({"suite": suite["name"], "cells": records, "table": table}, f, indent=2)
    with open(os.path.join(out_dir, "table.md"), "w", encoding="utf-8") as f:
        f.write(format_table(table, "md"))
    with open(os.path.join(out_dir, "table.csv"), "w", encoding="utf-8") as f:
        f.write(format_table(table, "csv"))
    return records, table


def _metric_key(column):
    return {"mAP": "mAP", "ATE": "ATE", "AOE": "AOE", "AVE": "AVE", "composite": "composite"}[column]


def aggregate_table(records) -> list:
    """Mean and stdev over seeds per cell; failed runs are excluded and
    counted."""
    table = []
    for record in records:
        finals = [r["final"] for r in record["runs"] if r.get("ok")]
        row = {
            "name": record["name"],
            "seeds": [r["seed"] for r in record["runs"] if r.get("ok")],
            "failed": [r["seed"] for r in record["runs"] if not r.get("ok")],
        }
        for col in TABLE_COLUMNS:
            values = [f[_metric_key(col)] for f in finals]
            row[col] = statistics.fmean(values) if values else None
            row[f"{col}_std"] = statistics.stdev(values) if len(values) > 1 else 0.0
        table.append(row)
    return table


def format_table(table, fmt="md") -> str:
    """Render an aggregate table (md or csv), mean +/- stdev over seeds."""
    if fmt == "csv":
        lines = ["name," + ",".join(f"{c},{c}_std" for c in TABLE_COLUMNS) + ",seeds,failed"]
        for row in table:
            cells = [row["name"]]
            for c in TABLE_COLUMNS:
                v = row[c]
                cells.append("" if v is None else f"{v:.4f}")
                cells.append(f"{row[f'{c}_std']:.4f}")
            cells.append(";".join(str(s) for s in row["seeds"]))
            cells.append(";".join(str(s) for s in row["failed"]))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"
    if fmt != "md":
        raise ConfigError(f"unknown table format {fmt!r}")
    header = "| cell | " + " | ".join(TABLE_COLUMNS) + " | seeds |"
    rule = "|" + "---|" * (len(TABLE_COLUMNS) + 2)
    lines = [header, rule]
    for row in table:
        cells = [row["name"]]
        for c in TABLE_COLUMNS:
            v = row[c]
            if v is None:
                cells.append("failed")
            else:
                cells.append(f"{v:.4f} ± {row[f'{c}_std']:.4f}")
        seeds = ",".join(str(s) for s in row["seeds"])
        if row["failed"]:
            seeds += f" (failed: {','.join(str(s) for s in row['failed'])})"
        cells.append(seeds)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def report_rows_from_runs(run_dirs) -> list:
    """One table row per run directory, read from its result.json."""
    rows = []
    by_name = {}
    for run_dir in run_dirs:
        path = os.path.join(run_dir, "result.json")
        with open(path, "r", encoding="utf-8") as f:
            summary = json.load(f)
        cfg_path = os.path.join(run_dir, "config.json")
        seed = None
        if os.path.exists(cfg_path):
            with open(cfg_path, "r", encoding="utf-8") as f:
                seed = json.load(f).get("seed")
        name = os.path.basename(os.path.normpath(run_dir))
        # Group run dirs that differ only by a _seedN suffix.
        base = name.rsplit("_seed", 1)[0] if "_seed" in name else name
        by_name.setdefault(base, []).append((seed, summary["final"]))
    for base, entries in by_name.items():
        finals = [f for _, f in entries]
        row = {"name": base, "seeds": [s for s, _ in entries], "failed": []}
        for col in TABLE_COLUMNS:
            values = [f[_metric_key(col)] for f in finals]
            row[col] = statistics.fmean(values)
            row[f"{col}_std"] = statistics.stdev(values) if len(values) > 1 else 0.0
        rows.append(row)
    return rows
