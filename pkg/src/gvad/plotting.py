"""Report figures. Uses the non-interactive Agg backend and writes PNGs."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import pr_curve, roc_curve  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, out_dir, name: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    # fixed metadata keeps the files byte-stable across runs
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def classification_figures(scores, labels, out_dir: str | os.PathLike) -> list[Path]:
    with plt.rc_context(STYLE):
        fpr, tpr = roc_curve(scores, labels)
        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        ax.step(fpr, tpr, where="post", color="C0")
        ax.plot([0, 1], [0, 1], ls=":", color="grey", lw=0.8)
        ax.set(xlabel="False positive rate", ylabel="True positive rate", title="ROC", xlim=(0, 1), ylim=(0, 1.02))
        roc = _save(fig, out_dir, "roc.png")

        rec, prec = pr_curve(scores, labels)
        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        ax.step(rec, prec, where="post", color="C1")
        ax.set(xlabel="Recall", ylabel="Precision", title="Precision-recall", xlim=(0, 1), ylim=(0, 1.02))
        pr = _save(fig, out_dir, "pr.png")
    return [roc, pr]


def iou_histogram(ious: Sequence[float], out_dir, threshold: float = 0.25) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        ax.hist(list(ious), bins=20, range=(0, 1), color="C2", edgecolor="white")
        ax.axvline(threshold, color="k", ls="--", lw=0.8)
        ax.set(xlabel="IoU of matched pairs", ylabel="count", title="Grounding IoU")
        return _save(fig, out_dir, "iou_hist.png")


def lr_figure(curve: Sequence[tuple[int, int, float]], out_dir) -> Path:
    """Concatenated per-stage learning-rate curves."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 2.8))
        offset = 0
        for stage in sorted({s for s, _, _ in curve}):
            pts = [(t, lr) for s, t, lr in curve if s == stage]
            xs = [offset + t for t, _ in pts]
            ax.plot(xs, [lr for _, lr in pts], label=f"stage {stage}")
            offset = xs[-1]
        ax.set(xlabel="optimizer step", ylabel="learning rate", title="Curriculum LR schedule")
        ax.ticklabel_format(axis="y", style="sci", scilimits=(0, 0))
        ax.legend(frameon=False)
        return _save(fig, out_dir, "lr_schedule.png")


def stats_figures(stats: Mapping, durations: Sequence[float], objects_per_set: Sequence[int], out_dir) -> list[Path]:
    paths = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        ax.hist(list(durations), bins=30, color="C0", edgecolor="white")
        med = stats["phase1"]["duration_s"]["median"]
        if med is not None:
            ax.axvline(med, color="k", ls="--", lw=0.8)
        ax.set(xlabel="subclip duration (s)", ylabel="count", title="Retained subclips")
        paths.append(_save(fig, out_dir, "subclip_durations.png"))

        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        if objects_per_set:
            top = max(objects_per_set)
            ax.hist(list(objects_per_set), bins=range(0, top + 2), color="C3", edgecolor="white", align="left")
        ax.set(xlabel="objects per grounded subclip", ylabel="count", title="Narrated objects")
        paths.append(_save(fig, out_dir, "objects_per_subclip.png"))
    return paths
