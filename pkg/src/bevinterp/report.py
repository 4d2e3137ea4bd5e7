"""Run reporting: markdown + CSV tables with matplotlib figures beside them."""

from __future__ import annotations

import csv
import json
from pathlib import Path

EVAL_FIELDS = ["scenario", "mode", "ap50", "ap70", "n_scenes", "neighbor_params", "seed"]


def collect_eval_results(run_dirs) -> list:
    """Gather eval/*.json records from one or more run directories."""
    records = []
    for run in run_dirs:
        eval_dir = Path(run) / "eval"
        if not eval_dir.is_dir():
            continue
        for path in sorted(eval_dir.glob("*.json")):
            with open(path) as f:
                records.append(json.load(f))
    return records


def write_report_csv(records, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=EVAL_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for rec in records:
            writer.writerow(rec)


def write_report_markdown(records, path):
    lines = [
        "# Scenario evaluation",
        "",
        "| Scenario | Mode | AP@0.5 | AP@0.7 | Scenes | Neighbor params |",
        "|---|---|---|---|---|---|",
    ]
    for rec in records:
        lines.append(
            "| {scenario} | {mode} | {ap50:.3f} | {ap70:.3f} | {n_scenes} | {params} |".format(
                scenario=rec["scenario"], mode=rec["mode"], ap50=rec["ap50"],
                ap70=rec["ap70"], n_scenes=rec["n_scenes"],
                params=rec.get("neighbor_params", "-"),
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def render_scenario_figure(records, path):
    """Grouped bars of AP@0.5 / AP@0.7 per (scenario, mode)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    labels = [f"{r['scenario']}\n{r['mode']}" for r in records]
    ap50 = [r["ap50"] for r in records]
    ap70 = [r["ap70"] for r in records]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(labels)), 4))
    ax.bar(x - 0.18, ap50, width=0.36, label="AP@0.5")
    ax.bar(x + 0.18, ap70, width=0.36, label="AP@0.7")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("average precision")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


SWEEP_FIELDS = ["rank", "depth_factor", "trainable_params", "ap50", "ap70"]


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in SWEEP_FIELDS})


def render_sweep_figure(rows, path):
    """AP versus trainable-parameter count on a log x axis."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [r["trainable_params"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, [r["ap50"] for r in rows], "o-", label="AP@0.5")
    ax.plot(xs, [r["ap70"] for r in rows], "s--", label="AP@0.7")
    for r in rows:
        ax.annotate(f"R={r['rank']},T={r['depth_factor']}",
                    (r["trainable_params"], r["ap50"]),
                    textcoords="offset points", xytext=(4, 4), fontsize=7)
    ax.set_xscale("log")
    ax.set_xlabel("trainable parameters (prompt + resizer)")
    ax.set_ylabel("average precision")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
