"""Matplotlib renderings written next to the text/CSV outputs."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import BAND, MetricsReport
from .training import TrainLog, ema

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    # fixed metadata keeps repeated renders byte-stable
    "svg.hashsalt": "rescycle",
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_losses(trainlog: TrainLog, path, smoothing=0.9):
    """Generator, discriminator and cycle losses per iteration, raw and smoothed."""
    if not trainlog.rows:
        raise ValueError("empty training log")
    it = np.array([r.iter for r in trainlog.rows])
    series = {
        "G total": [r.report.loss_G_total for r in trainlog.rows],
        "D clean": [r.report.loss_D_clean for r in trainlog.rows],
        "D noisy": [r.report.loss_D_noisy for r in trainlog.rows],
        "cycle (clean+noisy)": list(trainlog.cycle_totals()),
    }
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
        for name in ("G total", "cycle (clean+noisy)"):
            line, = axes[0].plot(it, series[name], alpha=0.3, lw=0.8)
            axes[0].plot(it, ema(series[name], smoothing), color=line.get_color(), lw=1.4, label=name)
        for name in ("D clean", "D noisy"):
            line, = axes[1].plot(it, series[name], alpha=0.3, lw=0.8)
            axes[1].plot(it, ema(series[name], smoothing), color=line.get_color(), lw=1.4, label=name)
        axes[0].set_title("generators")
        axes[1].set_title("discriminators")
        for ax in axes:
            ax.set_xlabel("iteration")
            ax.set_ylabel("loss")
            ax.legend(frameon=False)
        _save(fig, path)


def plot_metrics(report: MetricsReport, path):
    """Per-record full-cycle MSE with the acceptance band shaded."""
    names = [r.record for r in report.rows]
    values = [r.mse for r in report.rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(names) + 2), 3.2))
        ax.axhspan(*BAND, color="tab:green", alpha=0.12, label="target band")
        colors = ["tab:blue" if r.within_band else "tab:red" for r in report.rows]
        ax.bar(range(len(names)), values, color=colors)
        ax.axhline(report.average_mse, color="k", ls="--", lw=1, label=f"average {report.average_mse:.3f}")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right")
        ax.set_ylabel("MSE (pixels scaled to [0, 1])")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_translations(panels, path, titles=("original", "translated", "reconstructed")):
    """Grid with one row per record: ``panels`` is a list of (record, [images...])."""
    if not panels:
        raise ValueError("nothing to plot")
    ncols = len(panels[0][1])
    with plt.rc_context(STYLE):
        h, w = panels[0][1][0].shape
        aspect = w / max(h, 1)
        fig, axes = plt.subplots(len(panels), ncols, squeeze=False,
                                 figsize=(min(3.0 * aspect, 6.0) * ncols, 2.2 * len(panels)))
        for row, (record, images) in enumerate(panels):
            for col, img in enumerate(images):
                ax = axes[row][col]
                ax.imshow(img, cmap="gray", vmin=0, vmax=255, aspect="auto", interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if row == 0 and col < len(titles):
                    ax.set_title(titles[col])
                if col == 0:
                    ax.set_ylabel(record)
        _save(fig, path)


def plot_corpus(images, path, ncols=4, title=None):
    """Thumbnail grid of a generated or ingested corpus."""
    n = len(images)
    if n == 0:
        raise ValueError("no images")
    nrows = math.ceil(n / ncols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, squeeze=False, figsize=(2.4 * ncols, 1.4 * nrows))
        for ax, img in zip(axes.flat, images):
            ax.imshow(img, cmap="gray", vmin=0, vmax=255, aspect="auto", interpolation="nearest")
        for ax in axes.flat:
            ax.axis("off")
        if title:
            fig.suptitle(title)
        _save(fig, path)
