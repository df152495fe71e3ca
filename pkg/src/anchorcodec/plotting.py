"""Report figures, rendered headless to files next to the CSV/JSON output."""

from __future__ import annotations

from pathlib import Path

import matplotlib as mpl
import numpy as np
from matplotlib.figure import Figure

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
WIDTH = 4.0  # inches

STYLE = {
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.prop_cycle": mpl.cycler(color=["#08589e", "#4eb3d3", "#7bccc4", "#a8ddb5",
                                         "#2b8cbe"]),
    "font.size": 8,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _figure(aspect: float = GOLDEN) -> tuple[Figure, object]:
    fig = Figure(figsize=(WIDTH, WIDTH * aspect))
    return fig, fig.add_subplot(1, 1, 1)


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    return path


def similarity_figure(report, path) -> Path:
    """Histogram of parent-child feature cosine, one line per level pair."""
    with mpl.rc_context(STYLE):
        fig, ax = _figure()
        centres = 0.5 * (report.bin_edges[1:] + report.bin_edges[:-1])
        for key in sorted(report.histograms):
            hist = report.histograms[key]
            frac = hist / max(hist.sum(), 1)
            ax.plot(centres, frac, marker="o", label=f"level {key[0]} ← {key[1]}")
        ax.set_xlabel("cosine similarity to parent feature")
        ax.set_ylabel("fraction of anchors")
        ax.set_xlim(-1, 1)
        if report.histograms:
            ax.legend(loc="upper left")
        return _save(fig, path)


def rd_figure(rows: list[dict], path) -> Path:
    """Bits per anchor against attribute MSE, annotated with lambda_e."""
    with mpl.rc_context(STYLE):
        fig, ax = _figure()
        rows = sorted(rows, key=lambda r: r["lambda_e"])
        x = [r["bits_per_anchor"] for r in rows]
        y = [r["distortion"] for r in rows]
        ax.plot(x, y, marker="o")
        for r, xi, yi in zip(rows, x, y):
            ax.annotate(f"{r['lambda_e']:g}", (xi, yi), textcoords="offset points",
                        xytext=(4, 4), fontsize=7)
        ax.set_xlabel("bits per anchor")
        ax.set_ylabel("attribute MSE")
        return _save(fig, path)


def storage_figure(report: dict[str, int], path) -> Path:
    """Horizontal bars of bytes per bitstream component."""
    with mpl.rc_context(STYLE):
        fig, ax = _figure()
        names = [k for k in report if k != "total"]
        vals = [report[k] / 1024.0 for k in names]
        ax.barh(names, vals)
        ax.invert_yaxis()
        ax.set_xlabel(f"KiB (total {report['total'] / 1024.0:.1f})")
        return _save(fig, path)


def loss_figure(bits_per_anchor: list[float], path) -> Path:
    with mpl.rc_context(STYLE):
        fig, ax = _figure()
        ax.plot(np.arange(1, len(bits_per_anchor) + 1), bits_per_anchor)
        ax.set_xlabel("iteration")
        ax.set_ylabel("train-mode bits per anchor")
        return _save(fig, path)


def ablation_figure(rows: list[dict], path) -> Path:
    """Stacked bits per anchor by component for each variant."""
    with mpl.rc_context(STYLE):
        fig, ax = _figure()
        labels = [r["variant"] for r in rows]
        left = np.zeros(len(rows))
        n = np.array([max(r["n_anchors"], 1) for r in rows], dtype=float)
        for part in ("hyper", "feature", "scaling", "offsets"):
            widths = np.array([r[f"{part}_bits"] for r in rows]) / n
            ax.barh(labels, widths, left=left, label=part)
            left += widths
        ax.invert_yaxis()
        ax.set_xlabel("bits per anchor")
        ax.legend(loc="lower right")
        return _save(fig, path)
