"""Proximity-based allocation of detections to ground truth.

Every ground truth gets its nearest unassigned detection by mean squared
error over the four (y, x, h, w) box means, assigned greedily in ascending
MSE order with no score thresholding, so all samples are retained and
correctly allocated for calibration. Class labels do not constrain the
matching.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .anchors import DecodedBox
from .errors import DomainError

__all__ = [
    "Detection",
    "GroundTruth",
    "MatchedPair",
    "MatchResult",
    "iou",
    "match_by_mse",
    "split_by_iou_threshold",
]


@dataclass(frozen=True)
class Detection:
    """One post-NMS detection: box moments plus optional score/quality."""

    image_id: str
    class_id: int
    box: DecodedBox
    score: float | None = None
    quality: float | None = None

    def __post_init__(self):
        if np.any(self.box.sds() < 0):
            raise DomainError("detection sds must be >= 0")


@dataclass(frozen=True)
class GroundTruth:
    """One annotated box with occlusion level; corners (ymin, xmin, ymax, xmax)."""

    image_id: str
    class_id: int
    corners: tuple[float, float, float, float]
    occlusion: int = 0

    def __post_init__(self):
        ymin, xmin, ymax, xmax = self.corners
        if ymax <= ymin or xmax <= xmin:
            raise DomainError(f"degenerate ground-truth corners {self.corners}")

    @property
    def area(self) -> float:
        ymin, xmin, ymax, xmax = self.corners
        return (ymax - ymin) * (xmax - xmin)

    def center_size(self) -> np.ndarray:
        ymin, xmin, ymax, xmax = self.corners
        return np.array([(ymin + ymax) / 2, (xmin + xmax) / 2, ymax - ymin, xmax - xmin])


@dataclass(frozen=True)
class MatchedPair:
    """A detection joined to its ground truth with per-coordinate residuals."""

    detection: Detection
    ground_truth: GroundTruth
    residual: tuple[float, float, float, float]  # |gt - mean| in (y, x, h, w)
    iou: float

    def __post_init__(self):
        if any(r < 0 for r in self.residual):
            raise DomainError("residuals must be >= 0")
        if not 0.0 <= self.iou <= 1.0:
            raise DomainError(f"iou must lie in [0, 1], got {self.iou}")


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[MatchedPair, ...]
    unmatched_detections: tuple[Detection, ...]
    unmatched_ground_truths: tuple[GroundTruth, ...]


def iou(a, b) -> float:
    """Intersection over union of two corner boxes (ymin, xmin, ymax, xmax)."""
    ay0, ax0, ay1, ax1 = a
    by0, bx0, by1, bx1 = b
    ih = min(ay1, by1) - max(ay0, by0)
    iw = min(ax1, bx1) - max(ax0, bx0)
    if ih <= 0 or iw <= 0:
        return 0.0
    inter = ih * iw
    union = (ay1 - ay0) * (ax1 - ax0) + (by1 - by0) * (bx1 - bx0) - inter
    return inter / union


def _make_pair(det: Detection, gt: GroundTruth) -> MatchedPair:
    residual = np.abs(gt.center_size() - det.box.means())
    return MatchedPair(
        detection=det,
        ground_truth=gt,
        residual=tuple(float(r) for r in residual),
        iou=iou(det.box.corners, gt.corners),
    )


def match_by_mse(detections, ground_truths) -> MatchResult:
    """Greedy nearest-neighbour allocation per image.

    All candidate (gt, det) pairs within an image are sorted by ascending
    MSE over the four box-mean coordinates; a pair is taken when both sides
    are still unassigned. The matching is a partial injection. Ties break
    on (mse, gt index, det index) so shuffled inputs produce the same pair
    set.
    """
    by_image: dict[str, tuple[list, list]] = defaultdict(lambda: ([], []))
    for det in detections:
        by_image[det.image_id][0].append(det)
    for gt in ground_truths:
        by_image[gt.image_id][1].append(gt)

    pairs: list[MatchedPair] = []
    unmatched_dets: list[Detection] = []
    unmatched_gts: list[GroundTruth] = []
    for image_id in sorted(by_image):
        dets, gts = by_image[image_id]
        # Index by a content key so input order cannot influence the result.
        dets = sorted(dets, key=_detection_sort_key)
        gts = sorted(gts, key=_ground_truth_sort_key)
        if not dets or not gts:
            unmatched_dets.extend(dets)
            unmatched_gts.extend(gts)
            continue
        det_means = np.stack([d.box.means() for d in dets])
        gt_means = np.stack([g.center_size() for g in gts])
        mse = ((gt_means[:, None, :] - det_means[None, :, :]) ** 2).mean(axis=2)
        order = sorted(
            ((mse[i, j], i, j) for i in range(len(gts)) for j in range(len(dets))),
        )
        gt_taken = [False] * len(gts)
        det_taken = [False] * len(dets)
        for _, i, j in order:
            if gt_taken[i] or det_taken[j]:
                continue
            gt_taken[i] = True
            det_taken[j] = True
            pairs.append(_make_pair(dets[j], gts[i]))
        unmatched_dets.extend(d for d, taken in zip(dets, det_taken) if not taken)
        unmatched_gts.extend(g for g, taken in zip(gts, gt_taken) if not taken)
    return MatchResult(tuple(pairs), tuple(unmatched_dets), tuple(unmatched_gts))


def _detection_sort_key(d: Detection):
    return (tuple(d.box.means()), tuple(d.box.sds()), d.class_id,
            d.score if d.score is not None else -1.0)


def _ground_truth_sort_key(g: GroundTruth):
    return (g.corners, g.class_id, g.occlusion)


def split_by_iou_threshold(pairs, threshold: float):
    """Partition pairs into (misdetections, correct): iou <= t vs iou > t."""
    if not 0.0 <= threshold <= 1.0:
        raise DomainError(f"threshold must lie in [0, 1], got {threshold}")
    md = tuple(p for p in pairs if p.iou <= threshold)
    cd = tuple(p for p in pairs if p.iou > threshold)
    return md, cd
