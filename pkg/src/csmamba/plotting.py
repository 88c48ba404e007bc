"""Report figures rendered to files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure


def _save(fig: Figure, path: Path) -> Path:
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=110, metadata={"Software": None})
    return path


def training_curves(report, path) -> Path:
    """Train/validation loss per epoch (left) and the learning-rate trace (right)."""
    epochs = [r.epoch for r in report.epochs]
    fig = Figure(figsize=(9, 3.4), layout="constrained")
    ax_loss, ax_lr = fig.subplots(1, 2)
    ax_loss.plot([0] + epochs, [report.initial_val_loss] + [r.val_loss for r in report.epochs],
                 marker="o", ms=3, label="validation")
    if epochs:
        ax_loss.plot(epochs, [r.train_loss for r in report.epochs], marker="o", ms=3, label="train")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_loss.grid(alpha=0.3)
    ax_lr.step(epochs, [r.lr for r in report.epochs], where="post")
    ax_lr.set_xlabel("epoch")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_yscale("log")
    ax_lr.grid(alpha=0.3)
    return _save(fig, Path(path))


def si_snri_histogram(values: Sequence[float], path, title: str = "per-file SI-SNRi") -> Path:
    fig = Figure(figsize=(5, 3.4), layout="constrained")
    ax = fig.subplots()
    ax.hist(list(values), bins=min(20, max(5, len(values) // 2)))
    ax.axvline(0.0, color="k", lw=0.8)
    ax.set_xlabel("SI-SNRi (dB)")
    ax.set_ylabel("files")
    ax.set_title(title)
    return _save(fig, Path(path))
