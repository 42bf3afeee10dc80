"""Shared factories for building detections, ground truths, and pairs."""

import numpy as np
import pytest

from boxuncert.anchors import DecodedBox
from boxuncert.matching import Detection, GroundTruth, MatchedPair


def make_detection(means, sds, image_id="img0", class_id=0, score=None, quality=None):
    return Detection(
        image_id=image_id,
        class_id=class_id,
        box=DecodedBox.from_arrays(np.asarray(means, float), np.asarray(sds, float)),
        score=score,
        quality=quality,
    )


def make_ground_truth(center_size, image_id="img0", class_id=0, occlusion=0):
    cy, cx, h, w = center_size
    return GroundTruth(
        image_id=image_id,
        class_id=class_id,
        corners=(cy - h / 2, cx - w / 2, cy + h / 2, cx + w / 2),
        occlusion=occlusion,
    )


def make_pair(det, gt):
    from boxuncert.matching import iou as iou_fn

    residual = np.abs(gt.center_size() - det.box.means())
    return MatchedPair(
        detection=det,
        ground_truth=gt,
        residual=tuple(float(r) for r in residual),
        iou=iou_fn(det.box.corners, gt.corners),
    )


def gaussian_pairs(n, sigma_true, k=1.0, seed=0, center=(200.0, 300.0), size=(80.0, 120.0)):
    """Pairs whose residuals are honest Gaussian draws with sd sigma_true and
    whose detections report sigma_true / k."""
    rng = np.random.default_rng(seed)
    sigma_true = np.broadcast_to(np.asarray(sigma_true, float), (n, 4))
    gt_cs = np.concatenate(
        [np.broadcast_to(center, (n, 2)), np.broadcast_to(size, (n, 2))], axis=1
    )
    noise = rng.standard_normal((n, 4)) * sigma_true
    pairs = []
    for i in range(n):
        det_means = gt_cs[i] + noise[i]
        det_means[2:] = np.maximum(det_means[2:], 1e-3)
        det = make_detection(det_means, sigma_true[i] / k, image_id=f"img{i}")
        gt = make_ground_truth(gt_cs[i], image_id=f"img{i}")
        pairs.append(make_pair(det, gt))
    return pairs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
