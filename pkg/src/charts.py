"""
SVG figures. CSV tables are the source of truth; these are views of them.

Rendering uses the non-interactive Agg backend with a fixed SVG hash salt
and no date metadata, so the same data gives the same file.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .errors import StorageError  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "retrieval-selective"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as e:
        raise StorageError(path, f"cannot write figure: {e}")
    finally:
        plt.close(fig)
    logger.info(f"Saved figure {path}.")
    return path



# RISK-COVERAGE


def plot_risk_coverage(curves: Dict[str, object], path, title: str = "", loss_name: str = "") -> Path:
    """
    One line per scorer; ``curves`` maps label -> RiskCoverageCurve.
    The random baseline is drawn as a dashed horizontal line.
    """
    fig, ax = plt.subplots(figsize=(6, 4.5))
    baseline = None
    for label, curve in curves.items():
        ax.plot(curve.coverage, curve.risk, label=f"{label} (AURC {curve.aurc:.4f})", linewidth=1.4)
        baseline = curve.aurc_random
    if baseline is not None:
        ax.axhline(baseline, color="grey", linestyle="--", linewidth=1, label="random")

    ax.set_xlim(0.0, 1.0)
    ax.set_xlabel("Coverage")
    ax.set_ylabel(f"Selective risk ({loss_name})" if loss_name else "Selective risk")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8, loc="best")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)



# SGR


def plot_sgr(sweep: pd.DataFrame, path, title: str = "") -> Path:
    """
    Top: evaluation coverage against target risk, one line per score.
    Bottom: evaluation risk against target risk, with the diagonal.
    """
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 7), sharex=True)
    for score, part in sweep.groupby("score", sort=False):
        part = part.sort_values("target_risk")
        top.plot(part["target_risk"], part["coverage_eval"], marker="o", markersize=3, label=score)
        feasible = part[part["feasible"].astype(bool)]
        bottom.scatter(feasible["target_risk"], feasible["empirical_risk_eval"], s=12, label=score)

    bottom.plot([0, 1], [0, 1], color="grey", linestyle="--", linewidth=1)
    top.set_ylabel("Coverage (evaluation)")
    top.set_ylim(-0.02, 1.02)
    bottom.set_xlabel("Target risk r*")
    bottom.set_ylabel("Empirical risk (evaluation)")
    bottom.set_xlim(0.0, 1.0)
    bottom.set_ylim(0.0, 1.0)
    top.legend(fontsize=7, loc="best")
    for ax in (top, bottom):
        ax.grid(alpha=0.3)
    if title:
        top.set_title(title)
    fig.tight_layout()
    return _save(fig, path)



# CORRELATION HEATMAP


def plot_correlation_heatmap(matrix: pd.DataFrame, groups: Dict[str, str], path) -> Path:
    """
    Spearman matrix as a heatmap; white lines separate score groups.
    Columns are expected in group order.
    """
    names = list(matrix.columns)
    fig, ax = plt.subplots(figsize=(1.0 + 0.5 * len(names), 0.8 + 0.5 * len(names)))
    image = ax.imshow(matrix.to_numpy(dtype=np.float64), cmap="RdBu_r", vmin=-1.0, vmax=1.0)
    ax.set_xticks(range(len(names)))
    ax.set_yticks(range(len(names)))
    ax.set_xticklabels(names, rotation=90, fontsize=7)
    ax.set_yticklabels(names, fontsize=7)

    labels = [groups.get(n, "other") for n in names]
    for i in range(1, len(labels)):
        if labels[i] != labels[i - 1]:
            ax.axhline(i - 0.5, color="white", linewidth=2)
            ax.axvline(i - 0.5, color="white", linewidth=2)

    fig.colorbar(image, ax=ax, fraction=0.046, pad=0.04, label="Spearman")
    fig.tight_layout()
    return _save(fig, path)



# CANDIDATE SETS


def plot_candidate_statistics(stats: pd.DataFrame, path, columns: Optional[Sequence[str]] = None) -> Path:
    """Scatter of candidate-set size against the other characteristics."""
    columns = list(columns or ["mean_pairwise_similarity", "precursor_mass"])
    columns = [c for c in columns if c in stats.columns]
    fig, axes = plt.subplots(1, max(1, len(columns)), figsize=(4.5 * max(1, len(columns)), 3.8), squeeze=False)
    for ax, column in zip(axes[0], columns):
        ax.scatter(stats["num_candidates"], stats[column], s=6, alpha=0.6)
        ax.set_xlabel("Number of candidates")
        ax.set_ylabel(column.replace("_", " "))
        ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)
