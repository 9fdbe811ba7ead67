"""Figures for evaluation reports: MSE-vs-time curves and truth/prediction snapshots."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "lines.linewidth": 1.2,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def plot_curves(curves: dict, path, train_horizon: float | None = None, title: str | None = None) -> Path:
    """One line per ``label -> (times, mse)`` on a log axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for label, (t, m) in sorted(curves.items()):
            ax.semilogy(t, np.maximum(m, 1e-300), label=label)
        if train_horizon is not None:
            ax.axvline(train_horizon, color="0.5", ls="--", lw=0.8)
        ax.set_xlabel("t")
        ax.set_ylabel("MSE")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_snapshots(truth: np.ndarray, pred: np.ndarray, times: np.ndarray, resolution: int, path,
                   channel: int = 0, max_cols: int = 5) -> Path:
    """Truth, prediction and error rows for a few times of one trajectory ([T x N x n] arrays)."""
    idx = np.unique(np.linspace(0, len(times) - 1, min(max_cols, len(times))).round().astype(int))
    rows = [("truth", truth), ("prediction", pred), ("error", pred - truth)]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(3, len(idx), figsize=(1.6 * len(idx), 4.8), squeeze=False)
        vmin, vmax = float(truth[..., channel].min()), float(truth[..., channel].max())
        for r, (name, arr) in enumerate(rows):
            for c, i in enumerate(idx):
                ax = axes[r, c]
                img = arr[i, :, channel].reshape(resolution, resolution)
                kw = {"vmin": vmin, "vmax": vmax} if r < 2 else {"cmap": "RdBu_r"}
                ax.imshow(img.T, origin="lower", **kw)
                ax.set_xticks([])
                ax.set_yticks([])
                if r == 0:
                    ax.set_title(f"t={times[i]:g}")
                if c == 0:
                    ax.set_ylabel(name)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
