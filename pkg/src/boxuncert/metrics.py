"""Uncertainty-quality and localization metrics plus binned correlations.

ECE convention (recorded in every report header): per-coordinate items are
pooled (4 per pair) and each contributes the folded Gaussian CDF value
u = 2*Phi(delta/sigma) - 1, i.e. the nominal coverage of the symmetric
interval mu +/- z*sigma that just reaches the observation. The ECE is the
mean absolute gap between nominal levels j/levels (j=1..levels) and the
empirical fraction of items with u <= level. NLL keeps the full Gaussian
constant log(2*pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import DomainError
from .matching import split_by_iou_threshold

__all__ = [
    "ECE_DEFINITION",
    "CONDITIONINGS",
    "MetricReport",
    "BinnedCorrelation",
    "sigma_obj",
    "ece",
    "coverage",
    "nll",
    "rmsue",
    "maue",
    "sharpness",
    "rmse",
    "mean_iou",
    "compute_report",
    "correlate",
    "md_cd_uncertainty",
    "report_to_text",
]

ECE_DEFINITION = (
    "mean |empirical - nominal| coverage of central mu+/-z*sigma intervals "
    "over evenly spaced confidence levels, per-coordinate items pooled"
)

CONDITIONINGS = ("area", "occlusion", "quality", "iou", "rmse_per_obj")


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    miou: float
    nll: float
    rmsue: float
    maue: float
    ece: float
    sharpness: float
    n_pairs: int
    n_items: int
    ece_levels: int = 10

    def to_dict(self) -> dict:
        d = {
            "rmse": self.rmse,
            "miou": self.miou,
            "nll": self.nll,
            "rmsue": self.rmsue,
            "maue": self.maue,
            "ece": self.ece,
            "sharpness": self.sharpness,
            "counts": {"pairs": self.n_pairs, "coordinate_items": self.n_items},
            "ece_levels": self.ece_levels,
            "ece_definition": ECE_DEFINITION,
        }
        return d


@dataclass(frozen=True)
class BinnedCorrelation:
    """Quantile-binned (or per-level) mean +/- sd of sigma_obj."""

    conditioning: str
    edges: tuple[float, ...]  # len(bins)+1 for quantile bins; levels for occlusion
    centers: tuple[float, ...]
    counts: tuple[int, ...]
    means: tuple[float, ...]
    sds: tuple[float, ...]
    norm_constant: float

    @property
    def normalized_means(self) -> tuple[float, ...]:
        return tuple(m / self.norm_constant for m in self.means)

    def to_csv(self) -> str:
        lines = ["bin_center,mean,sd,normalized_mean"]
        for c, m, s, nm in zip(self.centers, self.means, self.sds, self.normalized_means):
            lines.append(f"{c!r},{m!r},{s!r},{nm!r}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "conditioning": self.conditioning,
            "edges": list(self.edges),
            "centers": list(self.centers),
            "counts": list(self.counts),
            "means": list(self.means),
            "sds": list(self.sds),
            "norm_constant": self.norm_constant,
            "normalized_means": list(self.normalized_means),
        }


def sigma_obj(detection) -> float:
    """Average of the four coordinate sds of one detection."""
    return float(detection.box.sds().mean())


def _sigma_delta(pairs, require_positive_sigma: bool = True):
    sigmas = np.stack([p.detection.box.sds() for p in pairs])
    deltas = np.stack([np.asarray(p.residual, dtype=float) for p in pairs])
    if require_positive_sigma and np.any(sigmas <= 0):
        raise DomainError("metric requires sigma > 0 for every coordinate")
    return sigmas, deltas


def _require_pairs(pairs) -> list:
    pairs = list(pairs)
    if not pairs:
        raise DomainError("metric requires at least one matched pair")
    return pairs


def ece(pairs, levels: int = 10) -> float:
    """Expected calibration error over pooled coordinate items."""
    pairs = _require_pairs(pairs)
    if levels < 1:
        raise DomainError("levels must be >= 1")
    sigmas, deltas = _sigma_delta(pairs)
    u = 2.0 * ndtr(deltas.ravel() / sigmas.ravel()) - 1.0
    ps = np.arange(1, levels + 1) / levels
    emp = (u[None, :] <= ps[:, None]).mean(axis=1)
    return float(np.abs(emp - ps).mean())


def coverage(pairs, num_sd: float = 1.0) -> float:
    """Fraction of coordinate items with |residual| <= num_sd * sigma."""
    pairs = _require_pairs(pairs)
    sigmas, deltas = _sigma_delta(pairs)
    return float((deltas.ravel() <= num_sd * sigmas.ravel()).mean())


def nll(pairs) -> float:
    """Mean Gaussian NLL per coordinate item, constant included."""
    pairs = _require_pairs(pairs)
    sigmas, deltas = _sigma_delta(pairs)
    var = sigmas**2
    per = (deltas**2 / var + np.log(var) + math.log(2 * math.pi)) / 2
    return float(per.mean())


def rmsue(pairs) -> float:
    pairs = _require_pairs(pairs)
    sigmas, deltas = _sigma_delta(pairs, require_positive_sigma=False)
    return float(np.sqrt(((deltas - sigmas) ** 2).mean()))


def maue(pairs) -> float:
    pairs = _require_pairs(pairs)
    sigmas, deltas = _sigma_delta(pairs, require_positive_sigma=False)
    return float(np.abs(deltas - sigmas).mean())


def sharpness(pairs) -> float:
    """Mean predicted variance over coordinate items."""
    pairs = _require_pairs(pairs)
    sigmas, _ = _sigma_delta(pairs, require_positive_sigma=False)
    return float((sigmas**2).mean())


def rmse(pairs) -> float:
    pairs = _require_pairs(pairs)
    _, deltas = _sigma_delta(pairs, require_positive_sigma=False)
    return float(np.sqrt((deltas**2).mean()))


def mean_iou(pairs) -> float:
    pairs = _require_pairs(pairs)
    return float(np.mean([p.iou for p in pairs]))


def compute_report(pairs, ece_levels: int = 10) -> MetricReport:
    pairs = _require_pairs(pairs)
    return MetricReport(
        rmse=rmse(pairs),
        miou=mean_iou(pairs),
        nll=nll(pairs),
        rmsue=rmsue(pairs),
        maue=maue(pairs),
        ece=ece(pairs, levels=ece_levels),
        sharpness=sharpness(pairs),
        n_pairs=len(pairs),
        n_items=4 * len(pairs),
        ece_levels=ece_levels,
    )


def _conditioning_values(pairs, conditioning: str) -> np.ndarray:
    if conditioning == "area":
        return np.array([p.ground_truth.area for p in pairs])
    if conditioning == "occlusion":
        return np.array([p.ground_truth.occlusion for p in pairs], dtype=float)
    if conditioning == "quality":
        missing = sum(p.detection.quality is None for p in pairs)
        if missing:
            raise DomainError(
                f"quality conditioning requires the quality column on every "
                f"detection; {missing} of {len(pairs)} lack it"
            )
        return np.array([p.detection.quality for p in pairs])
    if conditioning == "iou":
        return np.array([p.iou for p in pairs])
    if conditioning == "rmse_per_obj":
        return np.array(
            [math.sqrt(float(np.mean(np.square(p.residual)))) for p in pairs]
        )
    raise DomainError(f"unknown conditioning {conditioning!r}; pick one of {CONDITIONINGS}")


def correlate(pairs, conditioning: str, bins: int = 5) -> BinnedCorrelation:
    """Quantile-binned sigma_obj means/sds, normalized by the largest mean.

    Occlusion bins by discrete annotation level instead of quantiles.
    """
    pairs = _require_pairs(pairs)
    if bins < 1:
        raise DomainError("bins must be >= 1")
    values = _conditioning_values(pairs, conditioning)
    sig = np.array([sigma_obj(p.detection) for p in pairs])

    if conditioning == "occlusion":
        levels = np.unique(values)
        groups = [sig[values == lv] for lv in levels]
        edges = tuple(float(lv) for lv in levels)
        centers = edges
    else:
        qs = np.quantile(values, np.linspace(0, 1, bins + 1))
        qs = np.unique(qs)
        if qs.size < 2:  # constant conditioning variable
            qs = np.array([qs[0], qs[0] + 1.0])
        idx = np.clip(np.searchsorted(qs, values, side="right") - 1, 0, qs.size - 2)
        groups = [sig[idx == b] for b in range(qs.size - 1)]
        keep = [g.size > 0 for g in groups]
        groups = [g for g, k in zip(groups, keep) if k]
        centers = tuple(
            float((qs[b] + qs[b + 1]) / 2) for b, k in enumerate(keep) if k
        )
        edges = tuple(float(q) for q in qs)

    means = tuple(float(g.mean()) for g in groups)
    sds = tuple(float(g.std()) for g in groups)
    counts = tuple(int(g.size) for g in groups)
    norm = max(means)
    if norm <= 0:
        norm = 1.0
    return BinnedCorrelation(
        conditioning=conditioning,
        edges=edges,
        centers=centers,
        counts=counts,
        means=means,
        sds=sds,
        norm_constant=norm,
    )


def md_cd_uncertainty(pairs, thresholds) -> list[dict]:
    """Mean +/- sd of sigma_obj for the misdetection/correct split per
    threshold; an empty side is reported as absent (None), not zero."""
    pairs = _require_pairs(pairs)
    rows = []
    for t in thresholds:
        md, cd = split_by_iou_threshold(pairs, t)
        row = {"threshold": float(t), "md_count": len(md), "cd_count": len(cd)}
        for name, side in (("md", md), ("cd", cd)):
            if side:
                vals = np.array([sigma_obj(p.detection) for p in side])
                row[f"{name}_mean"] = float(vals.mean())
                row[f"{name}_sd"] = float(vals.std())
            else:
                row[f"{name}_mean"] = None
                row[f"{name}_sd"] = None
        rows.append(row)
    return rows


def report_to_text(report: MetricReport, title: str = "metrics") -> str:
    """Aligned-column human-readable rendering of a metric report."""
    rows = [
        ("rmse", report.rmse),
        ("mIoU", report.miou),
        ("nll", report.nll),
        ("rmsue", report.rmsue),
        ("maue", report.maue),
        ("ece", report.ece),
        ("sharpness", report.sharpness),
    ]
    width = max(len(name) for name, _ in rows)
    lines = [
        f"# {title}",
        f"# pairs={report.n_pairs} coordinate_items={report.n_items} "
        f"ece_levels={report.ece_levels}",
        f"# ece: {ECE_DEFINITION}",
    ]
    lines += [f"{name:<{width}}  {value:.6f}" for name, value in rows]
    return "\n".join(lines) + "\n"
