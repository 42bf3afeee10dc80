"""Matching, IoU, and MD/CD split tests with an exhaustive assignment oracle."""

import itertools

import numpy as np
import pytest

from boxuncert.errors import DomainError
from boxuncert.matching import iou, match_by_mse, split_by_iou_threshold

from conftest import make_detection, make_ground_truth, make_pair


def brute_force_min_mse(dets, gts):
    """Minimum-total-MSE assignment over all injections (n <= 6)."""
    det_means = [d.box.means() for d in dets]
    gt_means = [g.center_size() for g in gts]
    n = min(len(dets), len(gts))
    best = None
    for gt_idx in itertools.permutations(range(len(gts)), n):
        for det_idx in itertools.permutations(range(len(dets)), n):
            cost = sum(
                float(((gt_means[i] - det_means[j]) ** 2).mean())
                for i, j in zip(gt_idx, det_idx)
            )
            if best is None or cost < best[0]:
                best = (cost, set(zip(gt_idx, det_idx)))
    return best


class TestIou:
    def test_identical(self):
        assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0

    def test_half_shifted_unit_squares(self):
        # overlap area 1/2, union 3/2
        assert iou((0, 0, 1, 1), (0, 0.5, 1, 1.5)) == pytest.approx(1 / 3, rel=1e-12)

    def test_touching_edges(self):
        assert iou((0, 0, 1, 1), (0, 1, 1, 2)) == 0.0


class TestMatchByMse:
    def test_exact_hit(self):
        det = make_detection([50, 50, 20, 20], [1, 1, 1, 1])
        gt = make_ground_truth([50, 50, 20, 20])
        result = match_by_mse([det], [gt])
        assert len(result.pairs) == 1
        pair = result.pairs[0]
        assert pair.residual == (0, 0, 0, 0)
        assert pair.iou == 1.0
        assert not result.unmatched_detections and not result.unmatched_ground_truths

    def test_crossed_offsets_match_brute_force(self):
        gts = [make_ground_truth([10, 10, 8, 8]), make_ground_truth([40, 40, 8, 8])]
        dets = [
            make_detection([11, 11, 8, 8], [1, 1, 1, 1]),  # near gt0
            make_detection([38, 41, 8, 8], [1, 1, 1, 1]),  # near gt1
        ]
        result = match_by_mse(dets, gts)
        _, oracle = brute_force_min_mse(dets, gts)
        got = {
            (g.center_size()[0], d.box.means()[0])
            for d, g in ((p.detection, p.ground_truth) for p in result.pairs)
        }
        want = {(gts[i].center_size()[0], dets[j].box.means()[0]) for i, j in oracle}
        assert got == want

    def test_images_partition_the_matching(self):
        det = make_detection([50, 50, 20, 20], [1, 1, 1, 1], image_id="A")
        gt = make_ground_truth([50, 50, 20, 20], image_id="B")
        result = match_by_mse([det], [gt])
        assert not result.pairs
        assert result.unmatched_detections == (det,)
        assert result.unmatched_ground_truths == (gt,)

    def test_partial_injection(self, rng):
        dets = [
            make_detection(rng.uniform(20, 400, 4), rng.uniform(0.5, 3, 4))
            for _ in range(12)
        ]
        gts = [make_ground_truth(rng.uniform(20, 200, 4)) for _ in range(8)]
        result = match_by_mse(dets, gts)
        assert len(result.pairs) == 8
        det_ids = [id(p.detection) for p in result.pairs]
        gt_ids = [id(p.ground_truth) for p in result.pairs]
        assert len(set(det_ids)) == len(det_ids)
        assert len(set(gt_ids)) == len(gt_ids)
        assert len(result.unmatched_detections) == 4

    def test_permutation_invariance(self, rng):
        dets = [
            make_detection(rng.uniform(20, 400, 4), rng.uniform(0.5, 3, 4),
                           image_id=f"img{i % 3}")
            for i in range(15)
        ]
        gts = [
            make_ground_truth(rng.uniform(20, 200, 4), image_id=f"img{i % 3}")
            for i in range(9)
        ]
        base = match_by_mse(dets, gts)

        def key(p):
            return (p.detection.image_id, tuple(p.detection.box.means()),
                    p.ground_truth.corners)

        for seed in range(5):
            r = np.random.default_rng(seed)
            sd = list(dets)
            sg = list(gts)
            r.shuffle(sd)
            r.shuffle(sg)
            shuffled = match_by_mse(sd, sg)
            assert sorted(map(key, shuffled.pairs)) == sorted(map(key, base.pairs))
            assert [p.residual for p in sorted(shuffled.pairs, key=key)] == [
                p.residual for p in sorted(base.pairs, key=key)
            ]

    def test_greedy_vs_exhaustive_oracle(self, rng):
        """Greedy is the specified behavior; the oracle quantifies its gap."""
        disagreements = 0
        total = 0
        for _ in range(60):
            n_gt = int(rng.integers(1, 5))
            n_det = int(rng.integers(1, 7))
            gts = [make_ground_truth(rng.uniform(30, 150, 4)) for _ in range(n_gt)]
            dets = [
                make_detection(rng.uniform(30, 150, 4), rng.uniform(0.5, 2, 4))
                for _ in range(n_det)
            ]
            result = match_by_mse(dets, gts)
            greedy_cost = sum(
                float(((p.ground_truth.center_size() - p.detection.box.means()) ** 2).mean())
                for p in result.pairs
            )
            oracle_cost, _ = brute_force_min_mse(dets, gts)
            assert greedy_cost >= oracle_cost - 1e-9
            total += 1
            if greedy_cost > oracle_cost + 1e-9:
                disagreements += 1
        print(f"greedy vs optimal assignment: {disagreements}/{total} instances differ")

    def test_empty_inputs(self):
        result = match_by_mse([], [])
        assert result.pairs == ()


class TestSplit:
    def make_pairs_with_ious(self, targets):
        pairs = []
        for t in targets:
            gt = make_ground_truth([50, 50, 20, 20])
            if t == 1.0:
                det = make_detection([50, 50, 20, 20], [1, 1, 1, 1])
            else:
                # slide the box horizontally until IoU hits the target:
                # for equal squares of side s, overlap fraction f gives
                # iou = f / (2 - f); invert for the shift
                f = 2 * t / (1 + t)
                det = make_detection([50, 50 + 20 * (1 - f), 20, 20], [1, 1, 1, 1])
            pairs.append(make_pair(det, gt))
        return pairs

    def test_threshold_zero_keeps_overlapping_as_correct(self):
        pairs = self.make_pairs_with_ious([0.2, 0.5, 0.8])
        md, cd = split_by_iou_threshold(pairs, 0.0)
        assert not md and len(cd) == 3

    def test_threshold_one_only_exact_matches_survive(self):
        pairs = self.make_pairs_with_ious([0.2, 1.0])
        md, cd = split_by_iou_threshold(pairs, 1.0)
        assert len(md) == 2 and not cd  # iou <= 1 always; exact match included

    def test_known_ious(self):
        pairs = self.make_pairs_with_ious([0.2, 0.5, 0.8])
        for p, want in zip(pairs, (0.2, 0.5, 0.8)):
            assert p.iou == pytest.approx(want, rel=1e-12)
        md, cd = split_by_iou_threshold(pairs, 0.5)
        assert {round(p.iou, 3) for p in md} == {0.2, 0.5}
        assert {round(p.iou, 3) for p in cd} == {0.8}

    def test_threshold_domain(self):
        with pytest.raises(DomainError):
            split_by_iou_threshold([], 1.5)
