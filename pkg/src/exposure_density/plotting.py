"""Static figures for pipeline reports.

Everything renders through the Agg backend with fixed sizes and no
timestamp metadata, so identical inputs give identical PNG bytes.
"""
from __future__ import annotations

from contextlib import contextmanager

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.cluster import hierarchy  # noqa: E402

CLASS_COLORS = {"residential": "#4477aa", "non_residential": "#ee6677", "outdoor": "#228833"}

_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "svg.hashsalt": "exposure-density",
}


@contextmanager
def report_style():
    with plt.rc_context(_STYLE):
        yield


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def hourly_series(hours, series: dict, path, title="Mean hourly activity per cell"):
    """Line plot of one or more class series over local hours."""
    with report_style():
        fig, ax = plt.subplots(figsize=(8, 3.2))
        for name, values in series.items():
            ax.plot(hours, values, lw=0.8, label=name.replace("_", " "), color=CLASS_COLORS.get(name))
        ax.set_xlabel("local hour index")
        ax.set_ylabel("devices per cell")
        ax.set_title(title)
        ax.legend(loc="upper right")
        _save(fig, path)


def exposure_bars(zones, changes, path, clusters=None):
    order = np.argsort(changes, kind="stable")
    zones = np.asarray(zones)[order]
    changes = np.asarray(changes)[order]
    with report_style():
        fig, ax = plt.subplots(figsize=(max(4.0, 0.18 * len(zones) + 1.5), 3.2))
        if clusters is not None:
            clusters = np.asarray(clusters)[order]
            palette = plt.get_cmap("tab10")
            colors = [palette(int(c) % 10) for c in clusters]
        else:
            colors = "#777777"
        ax.bar(np.arange(len(zones)), changes, color=colors)
        ax.axhline(0, color="black", lw=0.6)
        ax.set_xticks(np.arange(len(zones)))
        ax.set_xticklabels(zones, rotation=90, fontsize=6)
        ax.set_ylabel("relative change in exposure density")
        _save(fig, path)


def scatter(x, y, path, xlabel, ylabel, logy=False):
    with report_style():
        fig, ax = plt.subplots(figsize=(4, 3.4))
        ax.scatter(x, y, s=12, color="#4477aa")
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        _save(fig, path)


def dendrogram(linkage_matrix, labels, path):
    with report_style():
        fig, ax = plt.subplots(figsize=(max(4.0, 0.18 * len(labels) + 1.5), 3.6))
        hierarchy.dendrogram(linkage_matrix, labels=list(labels), ax=ax, color_threshold=None,
                             leaf_font_size=6)
        ax.set_ylabel("merge height")
        ax.grid(False)
        _save(fig, path)
