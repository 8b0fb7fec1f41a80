"""Report figures rendered to files (no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import CURVE_LABELS, KB, RDCurve  # noqa: E402

_STYLE = {"a1": ("tab:red", "o"), "a2c1": ("tab:blue", "s"), "a2c2": ("tab:green", "^"), "a3": ("tab:purple", "D")}


def plot_rate_map(curves: dict, ceiling: float | None, path) -> Path:
    """Rate (kilobytes per sample) against mAP, one line per topology.

    ``curves`` maps a curve key to an RDCurve or to (rates in bits, mAP values).
    """
    fig, ax = plt.subplots(figsize=(6, 4.2))
    for key, curve in curves.items():
        rates, quality = (curve.rates, curve.qualities) if isinstance(curve, RDCurve) else curve
        order = np.argsort(rates)
        color, marker = _STYLE.get(key, (None, "o"))
        ax.plot(np.asarray(rates)[order] / 8 / KB, np.asarray(quality)[order], marker=marker, color=color,
                label=CURVE_LABELS.get(key, key))
    if ceiling is not None:
        ax.axhline(ceiling, color="k", ls="--", lw=1, label="no compression")
    ax.set_xlabel("rate (KB per sample)")
    ax.set_ylabel("mAP (%)")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_feature_maps(camera: np.ndarray, lidar: np.ndarray, path) -> Path:
    """Side-by-side heat maps of one sample's camera and lidar features."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 4), sharey=True)
    lim = max(np.abs(camera).max(), np.abs(lidar).max(), 1e-6)
    for ax, values, title in ((axes[0], camera, "camera"), (axes[1], lidar, "lidar")):
        im = ax.imshow(values, aspect="auto", cmap="coolwarm", vmin=-lim, vmax=lim, interpolation="nearest")
        ax.set_title(title)
        ax.set_xlabel("feature dimension")
    axes[0].set_ylabel("query")
    fig.colorbar(im, ax=list(axes), shrink=0.8)
    return _save(fig, path)


def plot_training_logs(logs: dict, path) -> Path:
    """Epoch-mean training loss of every stored model."""
    fig, ax = plt.subplots(figsize=(6, 4.2))
    for name, log in logs.items():
        losses = log.losses
        if losses.size:
            ax.plot(np.arange(1, losses.size + 1), losses, lw=1, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    if len(logs) <= 12:
        ax.legend(fontsize=6)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
