"""Basic SVG renderings of experiment outputs. The same data is always written as CSV."""

import logging
from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "mapid"
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import Portrait  # noqa: E402

# Configure structured logging
logger = logging.getLogger(__name__)

# Fixed metadata keeps SVG output identical across reruns
_SVG_METADATA = {"Date": None, "Creator": "mapid"}


def _save(fig, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight", metadata=_SVG_METADATA)
    plt.close(fig)
    logger.debug(f"Wrote {path}")


def plot_state_space(
    path: Union[str, Path], inputs: np.ndarray, targets: np.ndarray, portrait: Portrait
) -> None:
    """Data pairs with the true and identified maps overlaid, one panel per output dimension."""
    n = inputs.shape[1]
    rows = portrait.rows
    out_col = portrait.header.index("output")
    fig, axes = plt.subplots(1, n, figsize=(5 * n, 4), squeeze=False)
    for j, ax in enumerate(axes[0]):
        ax.scatter(inputs[:, 0], targets[:, j], s=2, color="0.6", label="data")
        block = rows[rows[:, out_col] == j]
        if n == 1:
            ax.plot(block[:, 0], block[:, out_col + 1], color="k", lw=1, label="true")
            ax.plot(block[:, 0], block[:, out_col + 2], "--", color="tab:red", lw=1, label="model")
        else:
            # Slice of the 2-D grid nearest the mean of the second state
            other = block[:, 1]
            level = other[np.argmin(np.abs(other - np.mean(inputs[:, 1])))]
            line = block[other == level]
            ax.plot(line[:, 0], line[:, out_col + 1], color="k", lw=1, label="true")
            ax.plot(line[:, 0], line[:, out_col + 2], "--", color="tab:red", lw=1, label="model")
        ax.set_xlabel("x0")
        ax.set_ylabel(f"next x{j}")
        ax.legend(loc="best", fontsize=8)
    _save(fig, path)


def plot_trajectories(path: Union[str, Path], truth: np.ndarray, model: np.ndarray) -> None:
    n = truth.shape[1]
    fig, axes = plt.subplots(n, 1, figsize=(7, 3 * n), squeeze=False)
    for j, ax in enumerate(axes[:, 0]):
        ax.plot(np.arange(len(truth)), truth[:, j], "k.-", lw=1, label="true")
        ax.plot(np.arange(len(model)), model[:, j], ".--", color="tab:red", lw=1, label="model")
        ax.set_xlabel("t")
        ax.set_ylabel(f"x{j}")
        ax.legend(loc="best", fontsize=8)
    _save(fig, path)


def plot_rrmse_strip(
    path: Union[str, Path], aic_rrmse: Sequence[float], refined_rrmse: Sequence[float]
) -> None:
    """RRMSE of every instance at the AIC and OLS stages."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for x, values, label in ((0, aic_rrmse, "AIC"), (1, refined_rrmse, "OLS")):
        vals = np.asarray([v for v in values if v is not None and np.isfinite(v)], dtype=float)
        jitter = np.linspace(-0.15, 0.15, len(vals)) if len(vals) > 1 else np.zeros(len(vals))
        ax.scatter(x + jitter, vals, s=12, label=label)
    ax.set_xticks([0, 1], ["AIC", "OLS"])
    if all(v > 0 for v in (*aic_rrmse, *refined_rrmse) if v is not None and np.isfinite(v)):
        ax.set_yscale("log")
    ax.set_ylabel("RRMSE")
    _save(fig, path)
