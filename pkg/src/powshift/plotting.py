"""Figures for the report paths: bench timings and training curves."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_bench(report, path) -> Path:
    """Grouped bars of median time per case and engine, IQR as error bars."""
    cases = list(dict.fromkeys(r.case_id for r in report.rows))
    engines = list(dict.fromkeys(r.engine for r in report.rows))
    lookup = {(r.case_id, r.engine): r for r in report.rows}
    fig, ax = plt.subplots(figsize=(max(5, 1.6 * len(cases) + 2), 4))
    width = 0.8 / max(len(engines), 1)
    x = np.arange(len(cases))
    for j, engine in enumerate(engines):
        rows = [lookup.get((c, engine)) for c in cases]
        med = [r.median_ns / 1e6 if r else 0.0 for r in rows]
        iqr = [r.iqr_ns / 2e6 if r else 0.0 for r in rows]
        ax.bar(x + (j - (len(engines) - 1) / 2) * width, med, width, yerr=iqr, capsize=3, label=engine)
    ax.set_xticks(x)
    ax.set_xticklabels(cases, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("median time per conv (ms)")
    ax.set_title("MAC vs BAC convolution")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_training(history: Sequence[dict], path) -> Path:
    """Test accuracy and training loss per epoch, one line per mode."""
    modes = list(dict.fromkeys(h["mode"] for h in history))
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10, 4))
    for mode in modes:
        rows = [h for h in history if h["mode"] == mode]
        epochs = [h["epoch"] for h in rows]
        ax_acc.plot(epochs, [h["test_acc"] for h in rows], marker="o", ms=3, label=mode)
        ax_loss.plot(epochs, [h["loss"] for h in rows], marker="o", ms=3, label=mode)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("test accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_loss.set_yscale("log")
    for ax in (ax_acc, ax_loss):
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
