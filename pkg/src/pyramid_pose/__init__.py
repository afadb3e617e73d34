"""Single-shot 6D object pose estimation on a numpy autograd core.

A pyramid of aggregated features feeds three heads (anchor scores, box-corner
correspondences, a coarse mask).  Poses come from RANSAC-PnP over the pooled
correspondences and can be refined with ICP against depth.
"""

from .geometry import Intrinsics, Pose
from .heads import ModelConfig, PoseNetwork

__all__ = ["Intrinsics", "Pose", "ModelConfig", "PoseNetwork"]
__version__ = "0.1.0"
