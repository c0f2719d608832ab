"""Render report figures next to the delimited outputs.

Every report path (stats, label, eval, per-round artifacts) gets a PNG
rendered from the same CSV/JSON that was just written, so a run directory is
browsable without extra tooling: class-distribution bars, loss traces, and
per-class IoU / accuracy-by-size panels.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, out_path: Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return out_path


def fig_class_distribution(series: list[tuple[str, np.ndarray]], out_path) -> Path:
    """Grouped per-class frequency bars on a log scale (long tails stay visible)."""
    C = len(series[0][1])
    x = np.arange(C)
    width = 0.8 / len(series)
    fig, ax = plt.subplots(figsize=(9, 3.2))
    for i, (name, freqs) in enumerate(series):
        ax.bar(x + (i - (len(series) - 1) / 2) * width, np.asarray(freqs, float),
               width=width, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("class")
    ax.set_ylabel("pixel frequency")
    ax.set_xticks(x)
    ax.legend()
    return _save(fig, out_path)


def fig_loss_trace(rows: list[dict], out_path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    epochs = [r["epoch"] for r in rows]
    for key, label in (
        ("labeled_loss", "labeled"),
        ("pseudo_loss", "pseudo"),
        ("total_loss", "total"),
    ):
        ys = [r[key] for r in rows]
        if all(isinstance(y, float) and math.isnan(y) for y in ys):
            continue
        ax.plot(epochs, ys, marker=".", label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    ax.legend()
    return _save(fig, out_path)


def fig_eval(report_obj: dict, out_path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.2))
    iou = [float("nan") if v is None else v for v in report_obj["per_class_iou"]]
    miou = report_obj["miou"] if report_obj["miou"] is not None else float("nan")
    tail = report_obj["tail_miou"] if report_obj["tail_miou"] is not None else float("nan")
    ax1.bar(np.arange(len(iou)), iou)
    ax1.set_xlabel("class")
    ax1.set_ylabel("IoU")
    ax1.set_ylim(0, 1)
    ax1.set_title(f"mIoU {miou:.3f} / tail {tail:.3f}")
    sizes, accs = [], []
    for bucket in report_obj["accuracy_by_size"]:
        if bucket["accuracy"] is None:
            continue
        hi = bucket["hi"]
        sizes.append(bucket["lo"] if hi == float("inf") or hi is None else 0.5 * (bucket["lo"] + hi))
        accs.append(bucket["accuracy"])
    if sizes:
        ax2.plot(sizes, accs, marker="o")
        ax2.set_xscale("log")
    ax2.set_xlabel("component size (pixels)")
    ax2.set_ylabel("pixel accuracy")
    ax2.set_ylim(0, 1.02)
    fig.tight_layout()
    return _save(fig, out_path)


def _read_loss_csv(path: Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                {
                    "epoch": int(rec["epoch"]),
                    "labeled_loss": float(rec["labeled_loss"]),
                    "pseudo_loss": float(rec["pseudo_loss"]),
                    "total_loss": float(rec["total_loss"]),
                }
            )
    return rows


def render_label_report_figure(report_path, out_path=None, target=None) -> Path:
    report_path = Path(report_path)
    obj = json.loads(report_path.read_text())
    series = [("realized", np.asarray(obj["realized_freqs"]))]
    if target is not None:
        freqs = getattr(target, "freqs", target)
        series.insert(0, ("target", np.asarray(freqs, float)))
    out = out_path or report_path.with_suffix(".png")
    return fig_class_distribution(series, out)


def render_round_figures(round_dir, target=None) -> list[Path]:
    """PNG companions for whatever artifacts exist in a round directory."""
    round_dir = Path(round_dir)
    written = []
    report = round_dir / "pseudo_report.json"
    if report.exists():
        written.append(render_label_report_figure(report, target=target))
    trace = round_dir / "loss_trace.csv"
    if trace.exists():
        written.append(fig_loss_trace(_read_loss_csv(trace), trace.with_suffix(".png")))
    eval_path = round_dir / "eval.json"
    if eval_path.exists():
        obj = json.loads(eval_path.read_text())
        written.append(fig_eval(obj, eval_path.with_suffix(".png")))
    return written
