"""Plot emission for finished runs: loss, learning-rate, mAP, PR and ablation panels."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .train import read_metrics  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def metric_panels(metrics_path, out, prefix):
    rows = [r for r in read_metrics(metrics_path) if r["kind"] == "epoch"]
    if not rows:
        raise ValueError(f"{metrics_path}: no epoch records")
    ep = [r["epoch"] for r in rows]
    written = []
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ep, [r["L_d"] for r in rows], label="L_d")
    ax.plot(ep, [r["L_r"] for r in rows], label="L_r")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    written.append(_save(fig, out / f"{prefix}_loss.png"))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ep, [r["lr"] for r in rows])
    ax.set_xlabel("epoch")
    ax.set_ylabel("learning rate")
    written.append(_save(fig, out / f"{prefix}_lr.png"))
    val = [(r["epoch"], r["val_mAP"]) for r in rows if r["val_mAP"] != ""]
    if val:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(*zip(*val), marker="o")
        ax.set_xlabel("epoch")
        ax.set_ylabel("val mAP@0.5")
        written.append(_save(fig, out / f"{prefix}_map.png"))
    return written


def pr_panel(pr_path, out, prefix):
    curves = json.loads(Path(pr_path).read_text())
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, c in sorted(curves.items()):
        ax.plot(c["recall"], c["precision"], label=name)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    if curves:
        ax.legend()
    return [_save(fig, out / f"{prefix}_pr.png")]


def ablation_panel(ablation_path, out, prefix):
    res = json.loads(Path(ablation_path).read_text())
    names = sorted(res)
    med = [float(np.median(list(res[v].values()))) for v in names]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(names, med, color="0.7", label="median")
    for i, v in enumerate(names):
        vals = list(res[v].values())
        ax.scatter([i] * len(vals), vals, color="k", s=10, zorder=3)
    ax.set_ylabel("test mAP@0.5")
    ax.legend()
    return [_save(fig, out / f"{prefix}_ablation.png")]


def write_report(runs, out):
    """One file per available panel in each run directory; returns the paths written."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for run in runs:
        run = Path(run)
        if not run.is_dir():
            raise ValueError(f"{run} is not a directory")
        found = False
        if (run / "metrics.tsv").exists():
            written += metric_panels(run / "metrics.tsv", out, run.name)
            found = True
        if (run / "pr_curves.json").exists():
            written += pr_panel(run / "pr_curves.json", out, run.name)
            found = True
        if (run / "ablation.json").exists():
            written += ablation_panel(run / "ablation.json", out, run.name)
            found = True
        if not found:
            raise ValueError(f"{run}: nothing to report (no metrics.tsv, pr_curves.json or ablation.json)")
    return written
