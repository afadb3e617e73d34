"""ADD / ADDS / diameter against brute-force oracles, and recall reports."""

import json

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from pyramid_pose.geometry import Pose, random_rotation, rodrigues
from pyramid_pose.metrics import (Detection, EvalConfig, GroundTruth, add_score, adds_score, evaluate,
                                  model_diameter, subsample_points)


def add_oracle(pts, a, b):
    return np.mean([np.linalg.norm((a.R @ p + a.t) - (b.R @ p + b.t)) for p in pts])


def adds_oracle(pts, est, gt):
    e = [est.R @ p + est.t for p in pts]
    return np.mean([min(np.linalg.norm((gt.R @ p + gt.t) - q) for q in e) for p in pts])


def rand_pose(rng):
    return Pose(random_rotation(rng), rng.normal(0, 100, 3))


class TestScores:
    def test_identical_poses(self, rng):
        pts = rng.normal(size=(50, 3))
        p = rand_pose(rng)
        assert add_score(pts, p, p) == 0.0 and adds_score(pts, p, p) == 0.0

    def test_rigid_offset(self, rng):
        pts = rng.normal(size=(50, 3))
        p = rand_pose(rng)
        q = Pose(p.R, p.t + np.array([3.0, 4.0, 0.0]))
        assert add_score(pts, q, p) == pytest.approx(5.0, abs=1e-12)

    def test_against_oracles(self, rng):
        for _ in range(10):
            pts = rng.normal(0, 40, (120, 3))
            a, b = rand_pose(rng), rand_pose(rng)
            assert add_score(pts, a, b) == pytest.approx(add_oracle(pts, a, b), rel=1e-12)
            assert adds_score(pts, a, b) == pytest.approx(adds_oracle(pts, a, b), rel=1e-12)

    def test_symmetric_square(self):
        square = np.array([[x, y, 0.0] for x in (-50, 50) for y in (-50, 50)])
        gt = Pose(np.eye(3), np.array([0.0, 0.0, 800.0]))
        est = Pose(rodrigues(np.array([0.0, 0.0, np.pi / 2])), gt.t)
        assert adds_score(square, est, gt) == pytest.approx(0.0, abs=1e-9)
        assert add_score(square, est, gt) > 50

    def test_adds_never_exceeds_add(self, rng):
        pts = rng.normal(0, 30, (200, 3))
        for _ in range(50):
            a, b = rand_pose(rng), rand_pose(rng)
            assert adds_score(pts, a, b) <= add_score(pts, a, b) + 1e-9

    def test_invariant_to_common_transform(self, rng):
        pts = rng.normal(0, 30, (200, 3))
        a, b, c = rand_pose(rng), rand_pose(rng), rand_pose(rng)
        assert add_score(pts, c.compose(a), c.compose(b)) == pytest.approx(add_score(pts, a, b))
        assert adds_score(pts, c.compose(a), c.compose(b)) == pytest.approx(adds_score(pts, a, b))


class TestDiameter:
    def test_unit_cube(self):
        cube = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
        assert model_diameter(cube) == pytest.approx(np.sqrt(3))

    def test_single_point(self):
        assert model_diameter(np.ones((1, 3))) == 0.0

    def test_flat_cloud(self, rng):
        pts = np.c_[rng.normal(size=(100, 2)), np.zeros(100)]
        assert model_diameter(pts) == pytest.approx(cdist(pts, pts).max())

    def test_random_cloud(self, rng):
        for n in (5, 60, 700):
            pts = rng.normal(size=(n, 3)) * [30, 20, 10]
            assert model_diameter(pts) == pytest.approx(cdist(pts, pts).max(), rel=1e-12)

    def test_subsample_is_deterministic_and_bounded(self, rng):
        pts = rng.normal(size=(5000, 3))
        a, b = subsample_points(pts), subsample_points(pts)
        assert len(a) == 2000 and np.array_equal(a, b)
        assert len(subsample_points(pts[:10])) == 10


@pytest.fixture
def unit_problem(rng):
    pts = rng.normal(0, 50, (300, 3))
    meshes = {1: pts, 2: pts * 0.5}
    gts = [GroundTruth(i, c, rand_pose(rng)) for i in range(4) for c in (1, 2)]
    return meshes, gts


def shifted(p, mm):
    return Pose(p.R, p.t + np.array([mm, 0.0, 0.0]))


class TestEvaluate:
    def test_all_exact(self, unit_problem):
        meshes, gts = unit_problem
        rep = evaluate([Detection(g.image_id, g.class_id, 0.9, g.pose) for g in gts], gts, meshes)
        assert rep.per_class == {1: 1.0, 2: 1.0} and rep.mean_recall == 1.0

    def test_no_detections(self, unit_problem):
        meshes, gts = unit_problem
        rep = evaluate([], gts, meshes)
        assert rep.mean_recall == 0.0 and all(not np.isfinite(r.distance) for r in rep.records)

    def test_half_correct(self, unit_problem):
        meshes, gts = unit_problem
        dets = [Detection(g.image_id, g.class_id, 0.9, shifted(g.pose, 0.0 if g.image_id % 2 else 1e3)) for g in gts]
        rep = evaluate(dets, gts, meshes)
        assert rep.per_class == {1: 0.5, 2: 0.5}

    def test_threshold_is_strict(self):
        segment = np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]])
        g = GroundTruth(0, 1, Pose(np.eye(3), np.array([0.0, 0.0, 800.0])))
        assert not evaluate([Detection(0, 1, 0.9, shifted(g.pose, 10.0))], [g], {1: segment}).records[0].correct
        assert evaluate([Detection(0, 1, 0.9, shifted(g.pose, 9.99))], [g], {1: segment}).records[0].correct

    def test_highest_score_wins(self, unit_problem):
        meshes, gts = unit_problem
        g = gts[0]
        dets = [Detection(g.image_id, 1, 0.6, g.pose), Detection(g.image_id, 1, 0.8, shifted(g.pose, 500.0))]
        assert evaluate(dets, [g], meshes).mean_recall == 0.0

    def test_low_score_ignored(self, unit_problem):
        meshes, gts = unit_problem
        g = gts[0]
        assert evaluate([Detection(g.image_id, 1, 0.5, g.pose)], [g], meshes).mean_recall == 0.0

    def test_wrong_class_or_image_not_matched(self, unit_problem):
        meshes, gts = unit_problem
        g = gts[0]
        dets = [Detection(g.image_id, 2, 0.9, g.pose), Detection(g.image_id + 1, 1, 0.9, g.pose)]
        assert evaluate(dets, [g], meshes).mean_recall == 0.0

    def test_symmetric_classes_use_adds(self):
        square = np.array([[x, y, 0.0] for x in (-50, 50) for y in (-50, 50)])
        gt = GroundTruth(0, 1, Pose(np.eye(3), np.array([0.0, 0.0, 800.0])))
        det = Detection(0, 1, 0.9, Pose(rodrigues(np.array([0.0, 0.0, np.pi / 2])), gt.pose.t))
        assert evaluate([det], [gt], {1: square}).mean_recall == 0.0
        assert evaluate([det], [gt], {1: square}, EvalConfig(symmetric_classes={1})).mean_recall == 1.0

    def test_permutation_invariant(self, rng, unit_problem):
        meshes, gts = unit_problem
        dets = []
        for g in gts:
            dets += [Detection(g.image_id, g.class_id, s, shifted(g.pose, rng.uniform(0, 40)))
                     for s in rng.choice([0.7, 0.8, 0.9], 3)]
        ref = evaluate(dets, gts, meshes)
        for _ in range(5):
            perm = [dets[i] for i in rng.permutation(len(dets))]
            assert evaluate(perm, gts, meshes).to_dict() == ref.to_dict()

    def test_invalid_fraction(self):
        with pytest.raises(ValueError):
            EvalConfig(threshold_fraction=0.0)


class TestReport:
    def test_text_and_json(self, tmp_path, unit_problem):
        meshes, gts = unit_problem
        rep = evaluate([Detection(g.image_id, g.class_id, 0.9, g.pose) for g in gts[:5]], gts, meshes)
        rep.save(tmp_path, {1: "box_a", 2: "box_b"})
        text = (tmp_path / "report.txt").read_text()
        assert "box_a" in text and "Avg." in text
        data = json.loads((tmp_path / "report.json").read_text())
        assert data["mean_recall"] == pytest.approx(rep.mean_recall)
        assert data["counts"] == {"1": 4, "2": 4} and len(data["records"]) == 8

    def test_mean_is_unweighted(self):
        from pyramid_pose.metrics import EvalReport
        assert EvalReport({1: 1.0, 2: 0.0}, {1: 100, 2: 1}).mean_recall == 0.5
