"""Matplotlib figures written next to the line-delimited outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so reruns give identical bytes
_PNG_META = {"Software": None}

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_diagnostics(records, path, title=None):
    """Similarity and guidance strength per reverse step; the guided window is shaded."""
    steps = np.array([r.step for r in records])
    loss = np.array([np.nan if r.loss is None else r.loss for r in records], dtype=float)
    alpha = np.array([r.alpha for r in records], dtype=float)
    window = [r.step for r in records if r.in_window]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(5, 4), sharex=True)
        for ax in (ax1, ax2):
            if window:
                ax.axvspan(min(window) - 0.5, max(window) + 0.5, color="0.9", lw=0)
        ax1.plot(steps, loss, "-", color="k", lw=1)
        ax1.set_ylabel("sketch similarity L")
        ax2.plot(steps, alpha, "o", ms=2.5, color="C0")
        ax2.set_ylabel(r"guidance strength $\alpha$")
        ax2.set_xlabel("reverse step (T down to 1)")
        ax2.invert_xaxis()
        if title:
            ax1.set_title(title)
        return _save(fig, path)


def plot_loss_history(history, path, label="train"):
    epochs = np.arange(1, len(history["loss"]) + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(epochs, history["loss"], "o-", ms=3, lw=1, label=label)
        if history.get("heldout"):
            ax.plot(epochs[:len(history["heldout"])], history["heldout"], "s--", ms=3, lw=1, label="held-out")
            ax.legend(frameon=False)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss per example")
        return _save(fig, path)


def plot_recall(report, path):
    """Histogram of per-image recall with the corpus mean marked."""
    vals = [r.recall for r in report.included]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.hist(vals, bins=np.linspace(0, 1, 21), color="0.6", edgecolor="k", lw=0.5)
        if report.mean_recall is not None:
            ax.axvline(report.mean_recall, color="C3", lw=1.2, label=f"mean {report.mean_recall:.3f}")
            ax.legend(frameon=False)
        ax.set_xlabel("recall")
        ax.set_ylabel("images")
        ax.set_title(f"n={len(vals)}, excluded={report.exclusions}")
        return _save(fig, path)
