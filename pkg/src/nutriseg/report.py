"""Render metric reports and training logs to text tables and PNG figures."""

from __future__ import annotations

import io
import json
import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evalkit import MetricReport, emit_report  # noqa: E402
from .io import atomic_write_bytes  # noqa: E402

LOSS_COLUMNS = ("l_txt", "l_nutrition", "l_mask", "total")
# PNG text chunks would otherwise carry the matplotlib version
_PNG_META = {"Software": None}


def parse_train_log(lines: Sequence[str]) -> dict[str, list[float]]:
    rows = [ln.split("\t") for ln in lines if ln.strip()]
    if not rows:
        return {"step": [], **{c: [] for c in LOSS_COLUMNS}}
    header = rows[0]
    if header[0] != "step":
        raise ValueError("training log lacks its header line")
    cols = {name: i for i, name in enumerate(header)}
    out: dict[str, list[float]] = {"step": [float(r[0]) for r in rows[1:]]}
    for c in LOSS_COLUMNS:
        out[c] = [float(r[cols[c]]) for r in rows[1:]]
    return out


def _png(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return buf.getvalue()


def loss_figure(curves: dict[str, list[float]], smooth: int = 20) -> bytes:
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = curves["step"]
    for c in LOSS_COLUMNS:
        ys = curves[c]
        if not ys:
            continue
        k = max(1, min(smooth, len(ys)))
        avg = [sum(ys[max(0, i - k + 1) : i + 1]) / len(ys[max(0, i - k + 1) : i + 1]) for i in range(len(ys))]
        ax.plot(steps, avg, label=c)
    ax.set_xlabel("step")
    ax.set_ylabel(f"loss (running mean of {smooth})")
    ax.set_yscale("symlog", linthresh=1e-3)
    if steps:
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _png(fig)


def metrics_figure(report: MetricReport) -> bytes:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    seg = report.segmentation
    ax = axes[0]
    if seg:
        labels = [str(r["refer_k"]) for r in seg]
        ciou = [0.0 if r["ciou"] is None or math.isnan(r["ciou"]) else r["ciou"] for r in seg]
        acc = [0.0 if r["acc"] is None or math.isnan(r["acc"]) else r["acc"] for r in seg]
        x = range(len(seg))
        ax.bar([i - 0.2 for i in x], ciou, width=0.4, label="cIoU")
        ax.bar([i + 0.2 for i in x], acc, width=0.4, label="Acc")
        ax.set_xticks(list(x), labels)
        ax.set_ylim(0, 1.05)
        ax.legend()
    ax.set_title("segmentation by refer@k")
    ax = axes[1]
    if report.nutrition:
        names = [r["field"] for r in report.nutrition]
        vals = [r["mae_pct"] if r["mae_pct"] is not None and not math.isnan(r["mae_pct"]) else 0.0 for r in report.nutrition]
        ax.barh(names, vals)
        ax.set_xlabel("MAE % of mean")
    ax.set_title("nutrition")
    fig.tight_layout()
    return _png(fig)


def render(report: MetricReport, out_dir: str | Path, train_log: Sequence[str] | None = None) -> list[Path]:
    """Write report.tsv, report.json and the figures; returns the written paths."""
    out = Path(out_dir)
    files = {
        "report.tsv": emit_report(report, "table"),
        "report.json": emit_report(report, "json"),
        "metrics.png": metrics_figure(report),
    }
    if train_log is not None:
        files["losses.png"] = loss_figure(parse_train_log(train_log))
    written = []
    for name, data in files.items():
        atomic_write_bytes(out / name, data)
        written.append(out / name)
    return written


def load_report(path: str | Path) -> MetricReport:
    return MetricReport.from_json(json.loads(Path(path).read_text()))
