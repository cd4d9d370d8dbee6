"""Static figures rendered next to the delimited report output."""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read_log(run_dir):
    rows = []
    path = os.path.join(run_dir, "metrics.jsonl")
    if not os.path.exists(path):
        return rows
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def plot_loss_curves(run_dirs, out_png, labels=None):
    """Total and auxiliary loss over steps, one curve per run."""
    labels = labels or [os.path.basename(os.path.normpath(d)) for d in run_dirs]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for run_dir, label in zip(run_dirs, labels):
        rows = read_log(run_dir)
        if not rows:
            continue
        steps = [r["step"] for r in rows]
        axes[0].plot(steps, [r["loss_total"] for r in rows], label=label, linewidth=1)
        axes[1].plot(steps, [r["loss_hop"] for r in rows], label=label, linewidth=1)
    axes[0].set_title("total loss")
    axes[1].set_title("historical-prediction loss")
    for ax in axes:
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.grid(True, alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_metric_bars(rows, out_png):
    """Bar chart of composite and mAP per report row.

    ``rows`` are dicts with name, mAP, composite (means over seeds).
    """
    names = [r["name"] for r in rows]
    x = range(len(names))
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 4))
    width = 0.38
    ax.bar([i - width / 2 for i in x], [r.get("mAP") or 0.0 for r in rows], width, label="mAP")
    ax.bar([i + width / 2 for i in x], [r.get("composite") or 0.0 for r in rows], width, label="composite")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_pr_curves(pr_curves, out_png, title="precision-recall @ 2 m"):
    fig, ax = plt.subplots(figsize=(5, 4))
    for cls, (recall, precision) in sorted(pr_curves.items()):
        ax.plot(recall, precision, label=f"class {cls}", linewidth=1)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
