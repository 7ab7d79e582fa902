"""Diagnostic figures written straight to files (Agg canvas, no pyplot state)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {"figsize": (4.8, 3.6), "dpi": 120}
# fixed metadata keeps repeated PNG writes byte-identical
PNG_METADATA = {"Software": None}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fmt = path.suffix.lstrip(".").lower() or "png"
    fig.savefig(path, format=fmt, metadata=PNG_METADATA if fmt == "png" else None)
    return path


def plot_loss_trace(trace, path, window: int = 100, title: str = "training loss") -> Path:
    trace = np.asarray(trace, dtype=np.float64).ravel()
    fig = Figure(**STYLE)
    ax = fig.add_subplot()
    steps = np.arange(len(trace))
    ax.plot(steps, trace, lw=0.5, color="0.7", label="per batch")
    if len(trace) >= window > 1:
        c = np.cumsum(np.insert(trace, 0, 0.0))
        ax.plot(steps[window - 1:], (c[window:] - c[:-window]) / window, lw=1.2, color="C0",
                label=f"mean of {window}")
    ax.set_yscale("log" if np.all(trace > 0) else "linear")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_samples_2d(samples, path, reference=None, title: str = "samples") -> Path:
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] < 2:
        raise ValueError(f"need (n, >=2) samples, got {s.shape}")
    fig = Figure(**STYLE)
    ax = fig.add_subplot()
    if reference is not None:
        r = np.asarray(reference, dtype=np.float64)
        ax.plot(r[:, 0], r[:, 1], ",", color="0.6")
    ax.scatter(s[:, 0], s[:, 1], s=2, color="C1", linewidths=0)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_distance_histogram(distances: dict, path, radius: float | None = None) -> Path:
    """Nearest-neighbour distance histograms, one series per entry of ``distances``."""
    fig = Figure(**STYLE)
    ax = fig.add_subplot()
    for label, d in distances.items():
        ax.hist(np.asarray(d, dtype=np.float64), bins=60, histtype="step", label=label)
    if radius is not None:
        ax.axvline(radius, color="k", ls="--", lw=0.8)
    ax.set_xlabel("distance")
    ax.set_ylabel("count")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)
