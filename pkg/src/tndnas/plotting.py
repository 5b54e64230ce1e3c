"""Figures for search histories and the reward surface, rendered to files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _series(history, name):
    if isinstance(history, dict):
        return np.asarray(history[name], dtype=float)
    return np.array([getattr(r, name) for r in history], dtype=float)


def plot_history(history, path, title=None):
    """Accuracy, reward and mean sampled size against policy-update iteration."""
    it = _series(history, "iteration")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(it, _series(history, "max_sampled_accuracy"), label="max sampled acc")
    ax1.plot(it, _series(history, "argmax_genotype_accuracy"), label="argmax acc")
    ax1.plot(it, _series(history, "reward_mean"), label="mean reward", alpha=0.7)
    ax1.set_xlabel("iteration")
    ax1.legend(frameon=False, fontsize=8)
    ax2.plot(it, _series(history, "mean_sampled_params"), color="tab:red")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("mean sampled params")
    for ax in (ax1, ax2):
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    if title:
        fig.suptitle(title)
    return _finish(fig, path)


def plot_compare(histories, path):
    """Overlay of paired runs, ``histories`` maps a label to its history."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for label, h in histories.items():
        it = _series(h, "iteration")
        ax1.plot(it, _series(h, "argmax_genotype_accuracy"), label=label)
        ax2.plot(it, _series(h, "mean_sampled_params"), label=label)
    ax1.set_ylabel("argmax accuracy")
    ax2.set_ylabel("mean sampled params")
    for ax in (ax1, ax2):
        ax.set_xlabel("iteration")
        ax.legend(frameon=False, fontsize=8)
    return _finish(fig, path)


def plot_reward_surface(grid, path, title=None):
    """Filled contour of reward over (params, acc) from ``reward_surface_grid`` rows."""
    grid = np.asarray(grid)
    n = int(round(np.sqrt(len(grid))))
    g = grid.reshape(n, n, 3)
    fig, ax = plt.subplots(figsize=(5, 4))
    cs = ax.contourf(g[:, :, 1], g[:, :, 0], g[:, :, 2], levels=20, cmap="viridis")
    fig.colorbar(cs, ax=ax, label="reward")
    ax.set_xlabel("params")
    ax.set_ylabel("accuracy")
    if title:
        ax.set_title(title)
    return _finish(fig, path)
