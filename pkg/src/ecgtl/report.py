"""Metrics report rendering: JSON + delimited table + figure."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import METRIC_NAMES, MetricsReport, render_table


def write_report(
    rows: dict[str, MetricsReport],
    out_dir: str | Path,
    extra: dict | None = None,
) -> None:
    """Write metrics.json, metrics.csv, table.txt and metrics.png."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    payload = {name: r.to_dict() for name, r in rows.items()}
    if extra:
        payload["_run"] = extra
    (out / "metrics.json").write_text(json.dumps(payload, indent=2) + "\n")

    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "fold"] + list(METRIC_NAMES))
        for name, r in rows.items():
            for fold in r.folds:
                writer.writerow(
                    [name, fold["fold"]] + [fold[m] for m in METRIC_NAMES]
                )
            writer.writerow([name, "mean"] + [r.mean[m] for m in METRIC_NAMES])
            writer.writerow([name, "std"] + [r.std[m] for m in METRIC_NAMES])

    (out / "table.txt").write_text(render_table(rows) + "\n")
    _plot_metrics(rows, out / "metrics.png")


def _plot_metrics(rows: dict[str, MetricsReport], path: Path) -> None:
    methods = list(rows)
    x = np.arange(len(methods))
    width = 0.25
    fig, ax = plt.subplots(figsize=(max(6, 1.8 * len(methods)), 4))
    for j, metric in enumerate(METRIC_NAMES):
        means = [rows[m].mean[metric] or 0.0 for m in methods]
        stds = [rows[m].std[metric] or 0.0 for m in methods]
        ax.bar(x + (j - 1) * width, means, width, yerr=stds, capsize=3,
               label=metric)
    ax.set_xticks(x)
    ax.set_xticklabels(methods, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("fraction")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
