"""Figures for the CLI report paths (CTF profile, FSC curve, PR curve)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_ctf_profile", "plot_fsc", "plot_pr_curve", "pretty_axes"]


def pretty_axes(ax, xlabel="", ylabel="", title=""):
    ax.set_xlabel(xlabel, fontsize=12)
    ax.set_ylabel(ylabel, fontsize=12)
    if title:
        ax.set_title(title, fontsize=12)
    ax.tick_params(labelsize=10)
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)
    return ax


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ctf_profile(g, values, path, title=""):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(g, values, lw=1.0, color="k")
    ax.axhline(0.0, color="0.6", lw=0.5)
    ax.set_ylim(-1.05, 1.05)
    pretty_axes(ax, "spatial frequency (1/Å)", "CTF", title)
    return _save(fig, path)


def plot_fsc(curve, path, voxel_size=1.0, thresholds=(0.143, 0.5), title=""):
    """FSC versus spatial frequency with horizontal threshold guides."""
    d = curve.side_length
    freq = curve.shells / (d * voxel_size)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(freq, curve.values, marker=".", lw=1.0, color="C0")
    for t, style in zip(thresholds, ("--", ":")):
        ax.axhline(t, color="0.4", ls=style, lw=0.8, label=f"FSC = {t:g}")
    ax.set_ylim(min(-0.05, float(np.min(curve.values)) - 0.05), 1.05)
    ax.legend(frameon=False, fontsize=9)
    pretty_axes(ax, "spatial frequency (1/Å)", "FSC", title)
    return _save(fig, path)


def plot_pr_curve(curve, path, auprc_value=None, title=""):
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    r = np.r_[0.0, curve.recall]
    p = np.r_[curve.precision[:1] if len(curve.precision) else [1.0], curve.precision]
    ax.step(r, p, where="pre", color="C3", lw=1.2)
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    if auprc_value is not None:
        ax.text(0.05, 0.05, f"AUPRC = {auprc_value:.3f}", transform=ax.transAxes, fontsize=10)
    pretty_axes(ax, "recall", "precision", title)
    return _save(fig, path)
