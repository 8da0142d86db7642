"""Matplotlib figures for run directories and sweep tables (Agg backend, files only)."""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .gradscope import ALL  # noqa: E402

LOSS_KEYS = ("l_recon", "l_mel", "l_commit", "l_fusion", "l_total")


def plot_losses(records, path):
    """Raw loss terms against step on a log axis. ``records`` are step-log dicts."""
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [r["step"] for r in records]
    for key in LOSS_KEYS:
        vals = [r[key] for r in records]
        if any(v > 0 for v in vals):
            ax.plot(steps, vals, label=key[2:], lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_grad_variance(trace, path, tail_fraction=None):
    fig, ax = plt.subplots(figsize=(7, 4))
    for comp in trace.components():
        series = trace.variance_series(comp)
        if not series:
            continue
        xs, ys = zip(*series)
        ax.plot(xs, ys, marker=".", lw=2 if comp == ALL else 1, label=comp)
    if tail_fraction:
        steps = trace.steps()
        cut = steps[len(steps) - max(1, math.ceil(len(steps) * tail_fraction))]
        ax.axvline(cut, color="grey", ls=":", lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("variance of grad norms")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_ablation(rows, path):
    labels = [r["setting"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    axes[0].bar(labels, [r["accuracy"] for r in rows], color="tab:blue")
    axes[0].set_ylabel("probe accuracy")
    axes[0].set_ylim(0, 1)
    axes[1].bar(labels, [r["mel_error"] for r in rows], color="tab:orange")
    axes[1].set_ylabel("mel error")
    if rows:
        fig.suptitle(f"ablation: {rows[0]['axis']}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
