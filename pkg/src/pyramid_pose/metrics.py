"""ADD / ADDS pose scores, model diameter and recall reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .geometry import Pose

MAX_SCORING_POINTS = 2000


def subsample_points(points: np.ndarray, limit: int = MAX_SCORING_POINTS) -> np.ndarray:
    """Deterministic evenly strided subset of at most ``limit`` points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) <= limit:
        return points
    idx = np.linspace(0, len(points) - 1, limit).round().astype(int)
    return points[idx]


def add_score(points: np.ndarray, pose_est: Pose, pose_gt: Pose) -> float:
    """Mean distance between corresponding model points under both poses (mm)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return float(np.linalg.norm(pose_est.apply(points) - pose_gt.apply(points), axis=1).mean())


def adds_score(points: np.ndarray, pose_est: Pose, pose_gt: Pose) -> float:
    """Mean distance from each gt-posed point to the closest est-posed point (mm)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dist, _ = cKDTree(pose_est.apply(points)).query(pose_gt.apply(points))
    return float(dist.mean())


def model_diameter(points: np.ndarray) -> float:
    """Exact maximum pairwise distance.

    The farthest pair always lies on the convex hull, so only hull vertices are
    compared; degenerate (flat or tiny) clouds fall back to all points.
    """
    points = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 3), axis=0)
    if len(points) < 2:
        return 0.0
    cand = points
    if len(points) > 4:
        try:
            cand = points[ConvexHull(points).vertices]
        except QhullError:
            cand = points
    best = 0.0
    for start in range(0, len(cand), 512):
        block = cand[start:start + 512]
        d2 = ((block[:, None, :] - cand[None, :, :]) ** 2).sum(-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


@dataclass
class EvalConfig:
    threshold_fraction: float = 0.10
    symmetric_classes: frozenset = frozenset()
    score_threshold: float = 0.5

    def __post_init__(self):
        if self.threshold_fraction <= 0:
            raise ValueError("threshold fraction must be positive")
        self.symmetric_classes = frozenset(int(c) for c in self.symmetric_classes)


@dataclass
class Detection:
    image_id: int
    class_id: int
    score: float
    pose: Pose
    time: float = 0.0
    scene_id: int = 0


@dataclass
class GroundTruth:
    image_id: int
    class_id: int
    pose: Pose
    scene_id: int = 0


@dataclass
class InstanceRecord:
    scene_id: int
    image_id: int
    class_id: int
    score: float         # nan when no detection
    distance: float      # ADD or ADDS in mm, inf when no detection
    threshold: float
    correct: bool

    def as_dict(self) -> dict:
        out = dict(self.__dict__)
        for k in ("score", "distance"):
            out[k] = None if not np.isfinite(out[k]) else out[k]
        return out


@dataclass
class EvalReport:
    per_class: dict                   # class id -> recall
    counts: dict                      # class id -> number of ground-truth instances
    records: list = field(default_factory=list)

    @property
    def mean_recall(self) -> float:
        return float(np.mean(list(self.per_class.values()))) if self.per_class else 0.0

    def to_text(self, names: dict = None) -> str:
        names = names or {}
        rows = [f"{'class':<16}{'instances':>10}{'ADD(-S) recall':>16}"]
        for cid in sorted(self.per_class):
            label = names.get(cid, str(cid))
            rows.append(f"{label:<16}{self.counts[cid]:>10d}{100 * self.per_class[cid]:>15.1f}%")
        rows.append(f"{'Avg.':<16}{sum(self.counts.values()):>10d}{100 * self.mean_recall:>15.1f}%")
        return "\n".join(rows) + "\n"

    def to_dict(self) -> dict:
        return {
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "counts": {str(k): v for k, v in sorted(self.counts.items())},
            "mean_recall": self.mean_recall,
            "records": [r.as_dict() for r in self.records],
        }

    def save(self, directory, names: dict = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.txt").write_text(self.to_text(names))
        (directory / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def evaluate(detections: list, ground_truth: list, meshes: dict, cfg: EvalConfig = None) -> EvalReport:
    """Recall per class.  ``meshes`` maps class id to a model point array or a
    mesh-like object with ``vertices`` and ``diameter``.

    For each ground-truth instance the highest-scoring detection of its class
    in the same image (score above threshold) is scored; ties on score go to
    the detection with the smaller distance so that the result does not depend
    on detection order.
    """
    cfg = cfg or EvalConfig()
    points, diam = {}, {}
    for cid, m in meshes.items():
        verts = getattr(m, "scoring_points", None)
        verts = verts if verts is not None else getattr(m, "vertices", m)
        points[cid] = subsample_points(verts)
        diam[cid] = float(getattr(m, "diameter", model_diameter(verts)))

    by_key: dict = {}
    for d in detections:
        if d.score > cfg.score_threshold:
            by_key.setdefault((d.scene_id, d.image_id, d.class_id), []).append(d)

    records = []
    for gt in ground_truth:
        cid = gt.class_id
        thr = cfg.threshold_fraction * diam[cid]
        cands = by_key.get((gt.scene_id, gt.image_id, cid), [])
        score_fn = adds_score if cid in cfg.symmetric_classes else add_score
        if cands:
            top = max(c.score for c in cands)
            dist = min(score_fn(points[cid], c.pose, gt.pose) for c in cands if c.score == top)
            records.append(InstanceRecord(gt.scene_id, gt.image_id, cid, top, dist, thr, bool(dist < thr)))
        else:
            records.append(InstanceRecord(gt.scene_id, gt.image_id, cid, float("nan"), float("inf"), thr, False))

    per_class, counts = {}, {}
    for cid in sorted({r.class_id for r in records}):
        hits = [r.correct for r in records if r.class_id == cid]
        counts[cid] = len(hits)
        per_class[cid] = float(np.mean(hits))
    return EvalReport(per_class, counts, records)
