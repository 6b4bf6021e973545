"""
ws_charts.py — Convergence and loss-curve charts.

Kept out of ws_freqeval so matplotlib is only imported when a chart is
actually requested; the CLI and the test suites never need it otherwise.
"""

import logging
import os
import warnings
from typing import Optional

import pandas as pd

from ws_freqeval import TRACE_COLUMNS

warnings.filterwarnings("ignore", message=".*non-GUI backend.*")

logger = logging.getLogger("ws.charts")

_SERIES = (
    ("epe_total", "EPE (all)", "#1f4e79", "-"),
    ("epe_high", "EPE (edges)", "#c0392b", "--"),
    ("epe_low", "EPE (smooth)", "#27ae60", ":"),
)


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    try:
        plt.style.use("seaborn-v0_8-whitegrid")
    except OSError:
        plt.style.use("seaborn-whitegrid")
    return plt


def _save(fig, plt, path: str) -> None:
    # savefig infers the format from the suffix, so the temp name keeps it
    root, ext = os.path.splitext(path)
    tmp = f"{root}.tmp{ext or '.png'}"
    fig.savefig(tmp, dpi=150, bbox_inches="tight")
    plt.close(fig)
    os.replace(tmp, path)


def plot_convergence(trace: pd.DataFrame, path: str, title: Optional[str] = None) -> None:
    """EPE over all / edge / smooth pixels versus iteration k."""
    missing = [c for c in TRACE_COLUMNS if c not in trace.columns]
    if missing:
        raise ValueError(f"trace is missing columns {missing}")
    if trace.empty:
        logger.warning("Chart skipped: empty convergence trace")
        return
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    for col, label, colour, style in _SERIES:
        series = pd.to_numeric(trace[col], errors="coerce")
        if series.notna().any():
            ax.plot(trace["k"], series, style, color=colour, marker="o", markersize=3, label=label)
    ax.set_xlabel("iteration k")
    ax.set_ylabel("end-point error (px)")
    ax.set_title(title or "Convergence by frequency region")
    ax.legend(loc="upper right")
    _save(fig, plt, path)
    logger.info("Convergence chart → %s", path)


def plot_loss_curve(curve: pd.DataFrame, path: str) -> None:
    if curve.empty:
        logger.warning("Chart skipped: empty loss curve")
        return
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(curve["step"], curve["loss"], color="#1f4e79", linewidth=1.0)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("sequence loss")
    ax.set_title("Toy training loss")
    _save(fig, plt, path)
    logger.info("Loss chart → %s", path)
