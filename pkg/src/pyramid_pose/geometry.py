"""Pinhole camera, rigid poses and rotation helpers.  Lengths are millimetres."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K) -> "Intrinsics":
        K = np.asarray(K, dtype=np.float64).reshape(3, 3)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]))

    def normalize(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        return np.stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy], axis=1)


@dataclass
class Pose:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not self.is_valid():
            raise GeometryError("R is not a rotation: R^T R must be I and det(R) = +1 within 1e-6")

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.R.T + self.t

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """self o other: apply ``other`` first."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def is_valid(self, tol: float = 1e-6) -> bool:
        return (np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
                and abs(np.linalg.det(self.R) - 1) < tol)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)


def rodrigues(w: np.ndarray) -> np.ndarray:
    """Axis-angle vector to rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    k = skew(w / theta)
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


def rotation_angle(R: np.ndarray) -> float:
    c = (np.trace(R) - 1) / 2
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_distance(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, radians."""
    return rotation_angle(Ra.T @ Rb)


def orthonormalize(M: np.ndarray) -> np.ndarray:
    """Closest rotation (det +1) in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ D @ Vt


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def project(points3d: np.ndarray, pose: Pose, K: Intrinsics) -> np.ndarray:
    """Model-frame points -> (N, 2) pixel coordinates."""
    X = pose.apply(np.atleast_2d(points3d))
    bad = np.nonzero(X[:, 2] <= 0)[0]
    if len(bad):
        raise GeometryError(f"point {int(bad[0])} has non-positive depth {X[bad[0], 2]:.6g} in the camera frame")
    return np.stack([K.fx * X[:, 0] / X[:, 2] + K.cx, K.fy * X[:, 1] / X[:, 2] + K.cy], axis=1)


def backproject(depth: np.ndarray, mask: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Masked depth pixels with d > 0 -> (M, 3) camera-frame points."""
    depth = np.asarray(depth, dtype=np.float64)
    sel = np.asarray(mask, dtype=bool) & (depth > 0)
    v, u = np.nonzero(sel)
    d = depth[v, u]
    return np.stack([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d], axis=1)


def kabsch(src: np.ndarray, dst: np.ndarray, weights: np.ndarray = None) -> Pose:
    """Rigid transform minimising sum w * |R src + t - dst|^2."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    H = ((src - mu_s) * w[:, None]).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return Pose(R, mu_d - R @ mu_s)
