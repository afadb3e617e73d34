"""Evaluation driver: detections -> ADD(-S) recall report and BOP result rows."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence

from .config import RunConfig
from .data.synth import SceneSample
from .heads import PoseNetwork
from .infer import DetectionRecord, detect
from .metrics import Detection, EvalConfig, EvalReport, GroundTruth, evaluate

RESULT_COLUMNS = ("scene_id", "im_id", "obj_id", "score", "R", "t", "time")


def ground_truth(samples: Sequence[SceneSample]) -> list[GroundTruth]:
    return [GroundTruth(s.image_id, o.class_id, o.pose, s.scene_id) for s in samples for o in s.objects]


def as_detections(records: Sequence[DetectionRecord]) -> list[Detection]:
    return [Detection(r.image_id, r.class_id, r.score, r.final_pose, r.time_ms / 1000.0, r.scene_id)
            for r in records]


def eval_config(cfg: RunConfig, meshes: dict) -> EvalConfig:
    sym = set(cfg.eval.symmetric_classes) | {cid for cid, m in meshes.items() if getattr(m, "symmetric", False)}
    return EvalConfig(cfg.eval.threshold_fraction, frozenset(sym), cfg.eval.score_threshold)


def write_results(path, records: Sequence[DetectionRecord]) -> None:
    """BOP result file: one row per estimate, R row-major and t in mm
    space-separated, time in seconds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_COLUMNS)
        for r in records:
            p = r.final_pose
            w.writerow([r.scene_id, r.image_id, r.class_id, repr(r.score),
                        " ".join(repr(float(x)) for x in p.R.reshape(-1)),
                        " ".join(repr(float(x)) for x in p.t),
                        repr(r.time_ms / 1000.0)])


def read_results(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        for k in ("scene_id", "im_id", "obj_id"):
            row[k] = int(row[k])
        for k in ("score", "time"):
            row[k] = float(row[k])
        row["R"] = [float(x) for x in row["R"].split()]
        row["t"] = [float(x) for x in row["t"].split()]
    return rows


def run_eval(net: PoseNetwork, samples: Sequence[SceneSample], meshes: dict, cfg: RunConfig,
             use_icp: Optional[bool] = None, out_dir=None) -> tuple[EvalReport, list[DetectionRecord]]:
    records = detect(net, samples, meshes, cfg, use_icp=use_icp)
    report = evaluate(as_detections(records), ground_truth(samples), meshes, eval_config(cfg, meshes))
    if out_dir is not None:
        names = {cid: m.name for cid, m in meshes.items()}
        report.save(out_dir, names)
        write_results(Path(out_dir) / "results.csv", records)
    return report, records
