"""SVG figures: AP-vs-budget curves and belief maps."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

# deterministic SVG output: no random ids, no date stamp
plt.rcParams["svg.hashsalt"] = "activesearch"
plt.rcParams["svg.fonttype"] = "none"
_SVG_META = {"Date": None}


def _save(fig, path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META, bbox_inches="tight")
    plt.close(fig)


def plot_curves(curves, path, labels=None, title: str | None = None) -> None:
    """Evaluated windows on x, AP on y; one line per curve."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    labels = labels or [c.policy or f"curve {i}" for i, c in enumerate(curves)]
    for curve, label in zip(curves, labels):
        ax.plot(curve.budgets, curve.ap, marker="o", markersize=2.5, linewidth=1.4, label=label)
    ax.set_xlabel("evaluated windows")
    ax.set_ylabel("AP")
    ax.set_ylim(0.0, 1.02)
    ax.set_xlim(left=0)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", frameon=False)
    _save(fig, path)


def plot_belief_map(image, beliefs, path, visited=None, class_name: str | None = None,
                    title: str | None = None) -> None:
    """Proposal centers colored by belief, with visited and ground-truth boxes drawn on top.

    The image is drawn in normalized coordinates with y growing downwards.
    """
    beliefs = np.asarray(beliefs, dtype=np.float64)
    w = image.windows
    cx = w[:, 0] + 0.5 * w[:, 2]
    cy = w[:, 1] + 0.5 * w[:, 3]
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    order = np.argsort(beliefs, kind="stable")
    sc = ax.scatter(cx[order], cy[order], c=beliefs[order], s=10, cmap="viridis", linewidths=0)
    fig.colorbar(sc, ax=ax, label="belief")
    for i in (visited if visited is not None else []):
        x, y, bw, bh = w[i]
        ax.add_patch(Rectangle((x, y), bw, bh, fill=False, edgecolor="tab:orange",
                               linewidth=0.6, alpha=0.7))
    if class_name is not None:
        for x, y, bw, bh in image.gt(class_name):
            ax.add_patch(Rectangle((x, y), bw, bh, fill=False, edgecolor="tab:red",
                                   linewidth=1.6))
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(1.0, 0.0)
    ax.set_aspect(image.height / image.width if image.width and image.height else 1.0)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    _save(fig, path)
