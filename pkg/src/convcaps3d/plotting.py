"""Figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

import matplotlib as mpl

mpl.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(history, path, title: str = ""):
    """Loss components per iteration and validation Dice on a twin axis.

    ``history`` rows are ``(iter, lr, margin, ce, recon, total, val_dsc)``.
    """
    rows = np.array([r[:6] for r in history], dtype=np.float64)
    with mpl.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        for col, name in zip((2, 3, 4, 5), ("margin", "ce", "recon", "total")):
            ax.plot(rows[:, 0], rows[:, col], lw=1.0 if name != "total" else 1.6, label=name)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        val = [(r[0], r[6]) for r in history if r[6] is not None]
        if val:
            ax2 = ax.twinx()
            ax2.plot(*zip(*val), "k.-", lw=0.8, label="val DSC")
            ax2.set_ylim(0, 1)
            ax2.set_ylabel("validation DSC")
            ax2.spines["top"].set_visible(False)
        ax.legend(loc="upper right")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_metrics(report: dict, path):
    """Per-class DSC and ASD bars from a metrics report dictionary."""
    classes = sorted(report["classes"], key=int)
    dsc = [report["classes"][c]["dsc"] for c in classes]
    asd = [report["classes"][c]["asd_mm"] or 0.0 for c in classes]
    x = np.arange(len(classes))
    with mpl.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(6, 2.6))
        a1.bar(x, dsc, color="0.35")
        a1.set_ylim(0, 1)
        a1.set_ylabel("DSC")
        a2.bar(x, asd, color="0.65")
        a2.set_ylabel("ASD (mm)")
        for ax in (a1, a2):
            ax.set_xticks(x, [f"class {c}" for c in classes])
        return _save(fig, path)


def plot_slices(image: np.ndarray, labels: np.ndarray, path, truth: np.ndarray | None = None):
    """Middle axial slice of the first channel with label overlays."""
    z = image.shape[2] // 2
    panels = [("image", None), ("prediction", labels)]
    if truth is not None:
        panels.append(("ground truth", truth))
    with mpl.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.4 * len(panels), 2.6))
        for ax, (name, lab) in zip(np.atleast_1d(axes), panels):
            ax.imshow(image[:, :, z, 0].T, cmap="gray", origin="lower")
            if lab is not None:
                masked = np.ma.masked_equal(lab[:, :, z].T, 0)
                ax.imshow(masked, cmap="viridis", alpha=0.5, origin="lower",
                          vmin=0, vmax=max(int(lab.max()), 1))
            ax.set_title(name)
            ax.axis("off")
        return _save(fig, path)
