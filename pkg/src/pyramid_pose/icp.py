"""Point-to-point ICP with trimming."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, kabsch, rotation_distance


@dataclass
class IcpConfig:
    max_iters: int = 30
    tol: float = 1e-4          # stop when rotation change (rad) and translation change (mm) both fall below
    trim_fraction: float = 0.1


@dataclass
class IcpResult:
    pose: Pose
    iterations: int = 0
    converged: bool = False
    empty: bool = False        # scene or model cloud was empty; pose is the initial one
    residuals: list = field(default_factory=list)  # RMS of kept NN distances before each update


def icp_refine(model: np.ndarray, scene: np.ndarray, init: Pose, cfg: IcpConfig = None) -> IcpResult:
    """Refine ``init`` (model -> camera) so the transformed model cloud lands on
    the scene cloud.  Matches run model -> scene and the worst
    ``trim_fraction`` of matches are dropped each iteration."""
    cfg = cfg or IcpConfig()
    model = np.asarray(model, dtype=np.float64).reshape(-1, 3)
    scene = np.asarray(scene, dtype=np.float64).reshape(-1, 3)
    if len(scene) == 0 or len(model) == 0:
        return IcpResult(init, empty=True)
    tree = cKDTree(scene)
    n = len(model)
    keep = max(3, n - int(np.floor(cfg.trim_fraction * n)))
    pose = init
    result = IcpResult(init)
    for it in range(cfg.max_iters):
        dist, j = tree.query(pose.apply(model))
        order = np.argsort(dist, kind="stable")[:keep]
        result.residuals.append(float(np.sqrt(np.mean(dist[order] ** 2))))
        new = kabsch(model[order], scene[j[order]])
        d_rot = rotation_distance(pose.R, new.R)
        d_trans = float(np.linalg.norm(new.t - pose.t))
        pose = new
        result.iterations = it + 1
        if d_rot < cfg.tol and d_trans < cfg.tol:
            result.converged = True
            break
    result.pose = pose
    return result
