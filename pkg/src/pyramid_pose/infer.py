"""Inference: network scores -> pooled corner correspondences -> RANSAC-PnP,
optionally refined by ICP against the observed depth."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .anchors import decode_correspondences, flatten_head_output, generate_anchors
from .config import RunConfig
from .data.mesh import MeshModel
from .data.synth import SceneSample
from .geometry import Intrinsics, Pose, backproject, project
from .heads import PoseNetwork
from .icp import icp_refine
from .pnp import PnPError, ransac_pnp
from .train import MASK_STRIDE, image_tensor


@dataclass
class DetectionRecord:
    image_id: int
    class_id: int
    score: float
    corners: np.ndarray          # (M, 8, 2) decoded corners of the supporting anchors
    pose: Pose
    refined_pose: Optional[Pose] = None
    time_ms: float = 0.0
    num_anchors: int = 0
    num_inliers: int = 0
    scene_id: int = 0

    @property
    def final_pose(self) -> Pose:
        return self.refined_pose if self.refined_pose is not None else self.pose


def visible_model_points(mesh: MeshModel, pose: Pose, n: int, seed: int = 0) -> np.ndarray:
    """Surface samples on faces turned towards the camera at ``pose``."""
    tri = pose.apply(mesh.vertices)[mesh.faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    front = np.einsum("ij,ij->i", normal, tri[:, 0]) < 0
    if not front.any():
        return np.zeros((0, 3))
    sub = MeshModel(mesh.class_id, mesh.vertices, mesh.faces[front])
    return sub.sample_surface(n, seed)


def unoccluded(points: np.ndarray, pose: Pose, depth: np.ndarray, K: Intrinsics, margin: float) -> np.ndarray:
    """Boolean mask of model ``points`` (model frame) that the depth image
    does not contradict at ``pose``: they project inside the image onto a
    valid depth pixel that is not more than ``margin`` mm in front of them."""
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    z = pose.apply(points)[:, 2]
    uv = np.round(project(points, pose, K)).astype(np.int64)
    h, w = depth.shape
    inside = (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h) & (z > 0)
    observed = np.zeros(len(points))
    observed[inside] = depth[uv[inside, 1], uv[inside, 0]]
    return inside & (observed > 0) & (observed > z - margin)


def _upsample_mask(cells: np.ndarray, hw: tuple) -> np.ndarray:
    return np.repeat(np.repeat(cells, MASK_STRIDE, axis=0), MASK_STRIDE, axis=1)[:hw[0], :hw[1]]


def detect(net: PoseNetwork, samples: Sequence[SceneSample], meshes: dict, cfg: RunConfig,
           use_icp: Optional[bool] = None) -> list[DetectionRecord]:
    """One record per (image, class) whose pooled correspondences admit a pose.

    Every anchor with a location score above the threshold contributes its 8
    decoded corners paired with the model's 3D box corners; all of a class's
    anchors across levels form one RANSAC-PnP problem.
    """
    use_icp = cfg.infer.use_icp if use_icp is None else use_icp
    k = cfg.model.heads.num_classes
    records = []
    anchors = None
    for s in samples:
        t0 = time.perf_counter()
        if anchors is None or anchors_hw != s.shape:
            anchors, anchors_hw = generate_anchors(s.shape, cfg.model.anchors), s.shape
        out = net(image_tensor([s.rgb]))
        scores = np.concatenate([flatten_head_output(o.data, k) for o in out.location], axis=1)[0]
        corr = np.concatenate([flatten_head_output(o.data, 16) for o in out.correspondence], axis=1)[0]
        mask = out.mask.data[0]
        t_net = time.perf_counter() - t0
        for cls in range(1, k + 1):
            t1 = time.perf_counter()
            sel = np.nonzero(scores[:, cls - 1] > cfg.infer.score_threshold)[0]
            if len(sel) == 0 or cls not in meshes:
                continue
            mesh = meshes[cls]
            corners = decode_correspondences(corr[sel].astype(np.float64), anchors.boxes[sel])
            uv = corners.reshape(-1, 2)
            pts = np.tile(mesh.box_corners(), (len(sel), 1))
            try:
                res = ransac_pnp(uv, pts, s.K, cfg.infer.ransac)
            except PnPError:
                continue
            rec = DetectionRecord(s.image_id, cls, float(scores[sel, cls - 1].max()), corners, res.pose,
                                  num_anchors=len(sel), num_inliers=res.num_inliers,
                                  scene_id=s.scene_id)
            if use_icp and s.depth is not None:
                rec.refined_pose = refine_with_depth(res.pose, mesh, s.depth, mask[cls - 1] > 0.5, s.K, cfg)
            rec.time_ms = 1000.0 * (t_net + time.perf_counter() - t1)
            records.append(rec)
    return records


def refine_with_depth(pose: Pose, mesh: MeshModel, depth: np.ndarray, cell_mask: np.ndarray,
                      K: Intrinsics, cfg: RunConfig) -> Pose:
    """ICP of the camera-facing model surface against depth pixels under the
    predicted mask that lie within one diameter of the initial position.

    Model points hidden behind other surfaces in the depth image are left
    out, since model-to-scene matching would pull them onto the occluder.
    """
    scene = backproject(depth, _upsample_mask(cell_mask, depth.shape), K)
    if len(scene):
        scene = scene[np.linalg.norm(scene - pose.t, axis=1) < mesh.diameter]
    model = visible_model_points(mesh, pose, cfg.infer.icp_model_points)
    seen = unoccluded(model, pose, depth, K, cfg.infer.icp_occlusion_mm)
    if seen.sum() >= 3:
        model = model[seen]
    result = icp_refine(model, scene, pose, cfg.infer.icp)
    return result.pose
