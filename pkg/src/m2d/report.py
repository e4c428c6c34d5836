"""Report figures and delimited outputs for the CLI.

Every training command leaves a history CSV plus a loss-curve PNG beside
its checkpoint; evaluate leaves the metric report as JSON, CSV, and a bar
chart. PNGs are written without the library's Software tag so byte-level
reproducibility holds on a fixed platform.
"""

from __future__ import annotations

import csv
import io
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import MetricReport

_PNG_META = {"Software": None}


def write_atomic(path: str | Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def history_rows(history: list) -> list[dict]:
    """Normalize a loss history (floats or dataclass-likes) to dict rows."""
    rows = []
    for epoch, entry in enumerate(history):
        if hasattr(entry, "__dataclass_fields__"):
            row = {"epoch": epoch}
            row.update({k: getattr(entry, k) for k in entry.__dataclass_fields__})
        else:
            row = {"epoch": epoch, "loss": float(entry)}
        rows.append(row)
    return rows


def write_history_csv(history: list, path: str | Path) -> None:
    rows = history_rows(history)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    write_atomic(path, buf.getvalue().encode("utf-8"))


def save_loss_curves(history: list, path: str | Path, title: str) -> None:
    rows = history_rows(history)
    keys = [k for k in rows[0] if k != "epoch"]
    fig, ax = plt.subplots(figsize=(6, 4), dpi=120)
    epochs = [r["epoch"] for r in rows]
    for key in keys:
        ax.plot(epochs, [r[key] for r in rows], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if len(keys) > 1:
        ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata=_PNG_META)
    plt.close(fig)
    write_atomic(path, buf.getvalue())


def save_metric_chart(report: MetricReport, path: str | Path) -> None:
    entries = [
        (name, getattr(report, name))
        for name in ("fid", "r_top1", "r_top2", "r_top3", "mm_dist", "diversity", "multimodality")
        if getattr(report, name) is not None
    ]
    fig, ax = plt.subplots(figsize=(6, 4), dpi=120)
    names = [n for n, _ in entries]
    values = [v for _, v in entries]
    bars = ax.bar(names, values, color="#2c7fb8")
    ax.bar_label(bars, fmt="%.3f")
    ax.set_title("evaluation metrics")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata=_PNG_META)
    plt.close(fig)
    write_atomic(path, buf.getvalue())


def write_metrics_csv(report: MetricReport, path: str | Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value"])
    for name in ("fid", "r_top1", "r_top2", "r_top3", "mm_dist", "diversity", "multimodality"):
        value = getattr(report, name)
        if value is not None:
            writer.writerow([name, repr(float(value))])
    write_atomic(path, buf.getvalue().encode("utf-8"))
