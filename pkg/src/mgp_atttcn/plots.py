"""Figure rendering for the CLI report paths.

Every plot lands next to the delimited/JSONL output it illustrates; the
data files remain the authoritative export, figures are for eyeballing.
"""

from __future__ import annotations

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def save_metrics_by_horizon(rows_by_model: dict, path, title="Performance by horizon"):
    """AUROC and AUPR against prediction horizon, one line per model."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4), sharex=True)
    for metric, ax in zip(("auroc", "aupr"), axes):
        for name, rows in rows_by_model.items():
            hs = [r["horizon"] for r in rows if r[metric] is not None]
            means = [r[metric]["mean"] for r in rows if r[metric] is not None]
            stds = [r[metric]["std"] for r in rows if r[metric] is not None]
            if hs:
                ax.errorbar(hs, means, yerr=stds, marker="o", capsize=2, label=name)
        ax.set_xlabel("horizon to onset [h]")
        ax.set_ylabel(metric.upper())
        ax.set_ylim(0.0, 1.02)
        ax.grid(alpha=0.3)
    if axes[0].get_legend_handles_labels()[0]:
        axes[0].legend(fontsize=8)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_training_history(history: list, path):
    fig, ax1 = plt.subplots(figsize=(6, 3.4))
    epochs = [h["epoch"] for h in history]
    ax1.plot(epochs, [h["train_loss"] for h in history], color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [h["val_auroc"] for h in history], color="tab:orange", label="val AUROC")
    ax2.plot(epochs, [h["val_aupr"] for h in history], color="tab:green", label="val AUPR")
    ax2.set_ylabel("validation metric")
    ax2.set_ylim(0, 1.02)
    ax2.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_horizon_counts(stats_rows: list, path):
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    hs = [r["horizon"] for r in stats_rows]
    ax.bar([h - 0.2 for h in hs], [r["n_cases"] for r in stats_rows], width=0.4, label="cases")
    ax.bar([h + 0.2 for h in hs], [r["n_controls"] for r in stats_rows], width=0.4, label="controls")
    ax.set_xlabel("horizon to onset [h]")
    ax.set_ylabel("records")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_feature_covariances(matrices: list, lengthscales: list, names: list, path):
    """Heatmaps of the learned per-cluster feature covariances."""
    n = len(matrices)
    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 3.6))
    axes = np.atleast_1d(axes)
    for ax, mat, scale in zip(axes, matrices, lengthscales):
        vmax = float(np.abs(mat).max()) or 1.0
        im = ax.imshow(mat, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
        ax.set_xticks(range(len(names)))
        ax.set_yticks(range(len(names)))
        ax.set_xticklabels(names, rotation=90, fontsize=7)
        ax.set_yticklabels(names, fontsize=7)
        ax.set_title(f"lengthscale {scale:.1f} h", fontsize=9)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_patient_journey(bundle: dict, path):
    """Raw observations, posterior bands, attention weights and per-cell
    contributions for a single encounter, one row per stage."""
    grid_times = np.asarray(bundle["grid_times"])
    mean = np.asarray(bundle["posterior_mean"])  # (N, M)
    std = np.asarray(bundle["posterior_std"])
    alpha = np.asarray(bundle["alpha"])  # (N, 2)
    contrib = np.asarray(bundle["contributions"])  # (N, C, 2)
    mask = np.asarray(bundle["mask"], dtype=bool)
    names = bundle["feature_names"]
    m = mean.shape[1]
    show = min(m, 6)

    fig, axes = plt.subplots(4, 1, figsize=(8, 11))
    ax = axes[0]
    for f in range(show):
        sel = np.asarray(bundle["obs_features"]) == f
        ax.plot(np.asarray(bundle["obs_times"])[sel], np.asarray(bundle["obs_values"])[sel], ".", ms=4, label=names[f])
    ax.set_title("raw observations")
    ax.legend(fontsize=6, ncol=3)

    ax = axes[1]
    valid = ~mask
    for f in range(show):
        ax.plot(grid_times[valid], mean[valid, f], lw=1)
        ax.fill_between(
            grid_times[valid],
            mean[valid, f] - 2 * std[valid, f],
            mean[valid, f] + 2 * std[valid, f],
            alpha=0.15,
        )
    ax.set_title("posterior mean +- 2 sd on the hourly grid")

    ax = axes[2]
    ax.plot(grid_times, alpha[:, 0], label="class 0 (control)")
    ax.plot(grid_times, alpha[:, 1], label="class 1 (case)")
    ax.set_title("attention over time")
    ax.legend(fontsize=8)

    ax = axes[3]
    net = contrib[:, :, 1] - contrib[:, :, 0]  # cell-level pull toward the case class
    vmax = float(np.abs(net).max()) or 1.0
    im = ax.imshow(net.T, aspect="auto", cmap="RdBu_r", vmin=-vmax, vmax=vmax,
                   extent=[grid_times[0], grid_times[-1], len(names) - 0.5, -0.5])
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=7)
    ax.set_title("per-cell score contribution (case minus control)")
    ax.set_xlabel("hours before prediction")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
