"""Raster figure emission for evaluation reports.

Every plot is a pure function of the stored report arrays, so figures can
be regenerated bit-identically from a saved report.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)


def plot_rmse_map(rmse_map: np.ndarray, title: str, path: str | Path, vmax: float | None = None):
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(rmse_map, cmap="magma", vmin=0.0, vmax=vmax)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, label="RMSE")
    fig.tight_layout()
    _save(fig, Path(path))


def plot_delta_rmse(analysis, title: str, path: str | Path):
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.scatter(analysis.complexity, analysis.delta, s=6, color="0.6", alpha=0.5, label="patches")
    centers = (analysis.bin_edges[:-1] + analysis.bin_edges[1:]) / 2
    stable = analysis.bin_stable & ~np.isnan(analysis.bin_mean)
    ax.errorbar(centers[stable], analysis.bin_mean[stable], yerr=analysis.bin_stderr[stable],
                fmt="o", color="C0", label="binned mean")
    sparse = ~analysis.bin_stable & ~np.isnan(analysis.bin_mean)
    if sparse.any():
        ax.errorbar(centers[sparse], analysis.bin_mean[sparse], yerr=analysis.bin_stderr[sparse],
                    fmt="o", color="C0", alpha=0.3, label="binned mean (sparse)")
    ax.axhline(0.0, color="k", lw=0.8)
    r = analysis.pearson_r
    ax.set_title(f"{title} (pearson r = {'n/a' if r is None else f'{r:.3f}'})")
    ax.set_xlabel("scene complexity (mean reflectance gradient)")
    ax.set_ylabel("per-patch RMSE difference")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, Path(path))


def plot_error_difference_map(diff_map: np.ndarray, title: str, path: str | Path):
    v = float(np.abs(diff_map).max()) or 1.0
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(diff_map, cmap="RdBu_r", vmin=-v, vmax=v)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, label="|err A| - |err B|")
    fig.tight_layout()
    _save(fig, Path(path))


def plot_loss_curve(iterations, losses, title: str, path: str | Path):
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(iterations, losses, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, Path(path))
