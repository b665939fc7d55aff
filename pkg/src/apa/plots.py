"""
PNG figures for evaluation outputs.  matplotlib is optional: it is imported
on first use, and every function returns None (after a warning) without it.
"""

from __future__ import annotations

import warnings

import numpy as np


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        warnings.warn("matplotlib is not installed; skipping figures (pip install 'artifact[plots]')",
                      RuntimeWarning, stacklevel=3)
        return None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed metadata keeps repeated renders byte-identical
    plt.rcParams["svg.hashsalt"] = "apa"
    return plt


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata={"Software": None})


def plot_correlation(C, labels, path, title: str = "feature correlation"):
    """Row-correlation heat map with category boundaries marked."""
    plt = _pyplot()
    if plt is None:
        return None
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(C, vmin=-1, vmax=1, cmap="RdBu_r", interpolation="nearest")
    edges = np.flatnonzero(labels[1:] != labels[:-1]) + 0.5
    for e in edges:
        ax.axhline(e, color="k", lw=0.5)
        ax.axvline(e, color="k", lw=0.5)
    starts = np.r_[0, np.flatnonzero(labels[1:] != labels[:-1]) + 1]
    stops = np.r_[starts[1:], len(labels)]
    ticks = (starts + stops - 1) / 2.0
    ax.set_xticks(ticks)
    ax.set_xticklabels([str(labels[s]) for s in starts], rotation=90)
    ax.set_yticks(ticks)
    ax.set_yticklabels([str(labels[s]) for s in starts])
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
    return path


def plot_roc(curves, path, title: str = "ROC"):
    """``curves``: iterable of (name, fpr, tpr)."""
    plt = _pyplot()
    if plt is None:
        return None
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
    for name, fpr, tpr in curves:
        ax.plot(fpr, tpr, label=str(name))
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
    return path


def plot_confusion(M, categories, path, title: str = "confusion"):
    plt = _pyplot()
    if plt is None:
        return None
    M = np.asarray(M)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.imshow(M, cmap="Blues", interpolation="nearest")
    for i in range(M.shape[0]):
        for j in range(M.shape[1]):
            ax.text(j, i, str(M[i, j]), ha="center", va="center", fontsize="small")
    ax.set_xticks(range(len(categories)))
    ax.set_xticklabels(categories, rotation=45)
    ax.set_yticks(range(len(categories)))
    ax.set_yticklabels(categories)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
    return path
