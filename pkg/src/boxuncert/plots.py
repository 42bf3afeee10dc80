"""Figure rendering for the report paths; all figures go straight to file."""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

__all__ = [
    "save_reliability_diagram",
    "save_correlation_plot",
    "save_md_cd_plot",
    "save_bench_plot",
]


def _coverage_curve(pairs, grid):
    sigmas = np.stack([p.detection.box.sds() for p in pairs]).ravel()
    deltas = np.stack([np.asarray(p.residual, dtype=float) for p in pairs]).ravel()
    u = 2.0 * ndtr(deltas / sigmas) - 1.0
    return (u[None, :] <= grid[:, None]).mean(axis=1)


def save_reliability_diagram(path, pairs_by_label: dict, levels: int = 10) -> None:
    """Nominal vs empirical interval coverage, one curve per label."""
    grid = np.linspace(0.0, 1.0, 10 * levels + 1)
    fig, ax = plt.subplots(figsize=(4.5, 4.2))
    ax.plot([0, 1], [0, 1], "k:", label="ideal")
    for label, pairs in pairs_by_label.items():
        ax.plot(grid, _coverage_curve(pairs, grid), label=label)
    ax.set_xlabel("nominal confidence level")
    ax.set_ylabel("empirical coverage")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_correlation_plot(path, binned) -> None:
    """Normalized sigma_obj mean +/- sd per bin of the conditioning variable."""
    centers = np.asarray(binned.centers)
    means = np.asarray(binned.normalized_means)
    sds = np.asarray(binned.sds) / binned.norm_constant
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.errorbar(centers, means, yerr=sds, fmt="o-", capsize=3)
    ax.set_xlabel(binned.conditioning)
    ax.set_ylabel("normalized sigma_obj")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_md_cd_plot(path, rows) -> None:
    """Mean +/- sd of sigma_obj for misdetections vs correct detections."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ts = [r["threshold"] for r in rows]
    width = min(np.diff(sorted(set(ts))).min() if len(set(ts)) > 1 else 0.1, 0.1) * 0.4
    for off, side, color in ((-width / 2, "md", "tab:red"), (width / 2, "cd", "tab:green")):
        xs = [t + off for t, r in zip(ts, rows) if r[f"{side}_mean"] is not None]
        ys = [r[f"{side}_mean"] for r in rows if r[f"{side}_mean"] is not None]
        es = [r[f"{side}_sd"] for r in rows if r[f"{side}_mean"] is not None]
        if xs:
            ax.bar(xs, ys, width=width, yerr=es, color=color, capsize=3,
                   label=side.upper())
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("sigma_obj")
    ax.legend()
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_bench_plot(path, medians: dict) -> None:
    """Median decode wall time per variant (seconds per 1e5 decodes)."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    names = list(medians)
    ax.bar(names, [medians[n] for n in names], color="tab:blue")
    ax.set_ylabel("s per 1e5 decodes (median)")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
