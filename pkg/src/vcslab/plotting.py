"""Line plots written straight to SVG/PNG files (headless matplotlib)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "vcslab"  # stable element ids, so reruns are byte-identical
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def line_plot(path, series: dict[str, tuple], title: str = "", xlabel: str = "", ylabel: str = "") -> Path:
    """Write one chart with a line per ``label -> (x, y)``. Format follows the suffix."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        for label, (x, y) in series.items():
            ax.plot(np.asarray(x), np.asarray(y), label=label, linewidth=1.5)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        if len(series) > 1:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else None)
    finally:
        plt.close(fig)
    return path


def plot_losses(path, history, labels=("loss",), title="training loss") -> Path:
    """``history`` rows are ``(step, value, ...)``; one line per value column."""
    h = np.asarray(history, dtype=np.float64)
    series = {lab: (h[:, 0], h[:, i + 1]) for i, lab in enumerate(labels)}
    return line_plot(path, series, title, "gradient step", "loss")


def plot_eval(path, report) -> Path:
    series = {}
    for m in report.running:
        series[f"x{m:g} target"] = (report.steps, report.running[m])
    return line_plot(path, series, f"{report.env_id} running normalized score", "gradient step", "score")


def plot_profile(path, profile) -> Path:
    """NTK and Q profiles along the flattened action grid."""
    idx = np.arange(len(profile.normalized))
    q = profile.q_values
    span = q.max() - q.min()
    q_scaled = (q - q.min()) / span if span > 0 else np.zeros_like(q)
    return line_plot(
        path,
        {"normalized NTK": (idx, profile.normalized), "Q (min-max scaled)": (idx, q_scaled)},
        "action-grid profile",
        "grid action index",
        "value",
    )
