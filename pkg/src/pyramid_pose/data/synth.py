"""Flat-shaded z-buffer rendering of mesh models and random scene generation.

Pixel ``(row v, column u)`` samples the continuous image point ``(u, v)``,
the same convention :func:`pyramid_pose.geometry.project` and
:func:`pyramid_pose.geometry.backproject` use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..geometry import Intrinsics, Pose, project, rodrigues
from .mesh import MeshModel

NEAR_MM = 10.0


@dataclass
class ObjectAnnotation:
    class_id: int
    pose: Pose
    box: np.ndarray          # (4,) x1, y1, x2, y2 tight bounds of the projected mesh
    mask: np.ndarray         # (H, W) bool, visible pixels
    corners: np.ndarray      # (8, 2) projected 3D bounding-box corners


@dataclass
class SceneSample:
    rgb: np.ndarray                       # (H, W, 3) float32 in [0, 1]
    K: Intrinsics
    objects: list = field(default_factory=list)
    depth: Optional[np.ndarray] = None    # (H, W) float32 mm, 0 where empty
    scene_id: int = 0
    image_id: int = 0

    @property
    def shape(self) -> tuple:
        return self.rgb.shape[:2]


@dataclass
class SynthRanges:
    image_hw: tuple = (192, 256)
    focal: tuple = (300.0, 320.0)
    distance_mm: tuple = (600.0, 1200.0)
    azimuth_deg: tuple = (0.0, 360.0)
    elevation_deg: tuple = (-80.0, 80.0)
    objects_per_scene: tuple = (1, 4)
    min_visible_fraction: float = 0.6
    max_retries: int = 50

    def __post_init__(self):
        self.image_hw = tuple(int(x) for x in self.image_hw)
        lo, hi = self.objects_per_scene
        if not 1 <= lo <= hi:
            raise ValueError("objects_per_scene must satisfy 1 <= min <= max")
        if self.distance_mm[0] <= NEAR_MM:
            raise ValueError("objects must lie beyond the near plane")


def render(meshes: Sequence[MeshModel], poses: Sequence[Pose], K: Intrinsics, image_hw: tuple,
           background: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rasterise meshes; returns rgb (H, W, 3), depth (H, W) and an object id
    map (H, W) holding the mesh index or -1.

    Depth is the exact ray/plane intersection of each triangle, so pixels on a
    face back-project onto that face.  Faces are lit by a head light:
    brightness 0.35 + 0.65 |cos| of the angle between normal and view ray.
    """
    h, w = image_hw
    rgb = np.zeros((h, w, 3)) if background is None else np.array(background, dtype=np.float64)
    depth = np.full((h, w), np.inf)
    ids = np.full((h, w), -1, dtype=np.int64)
    for m_idx, (mesh, pose) in enumerate(zip(meshes, poses)):
        cam = pose.apply(mesh.vertices)
        if np.any(cam[:, 2] <= NEAR_MM):
            raise ValueError(f"mesh {m_idx} crosses the near plane")
        uv = project(mesh.vertices, pose, K)
        colors = mesh.face_colors if mesh.face_colors is not None else np.full((len(mesh.faces), 3), 0.7)
        for f_idx, face in enumerate(mesh.faces):
            p = uv[face]
            u0, v0 = np.floor(p.min(axis=0)).astype(int)
            u1, v1 = np.ceil(p.max(axis=0)).astype(int)
            u0, v0 = max(u0, 0), max(v0, 0)
            u1, v1 = min(u1, w - 1), min(v1, h - 1)
            if u0 > u1 or v0 > v1:
                continue
            area = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
            if abs(area) < 1e-12:
                continue
            vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1].astype(np.float64)
            # barycentric coordinates in screen space (sign-consistent with area)
            w0 = ((p[1, 0] - uu) * (p[2, 1] - vv) - (p[2, 0] - uu) * (p[1, 1] - vv)) / area
            w1 = ((p[2, 0] - uu) * (p[0, 1] - vv) - (p[0, 0] - uu) * (p[2, 1] - vv)) / area
            w2 = 1.0 - w0 - w1
            inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
            if not inside.any():
                continue
            a, b, c = cam[face]
            normal = np.cross(b - a, c - a)
            rays = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)
            denom = rays @ normal
            with np.errstate(divide="ignore", invalid="ignore"):
                z = (normal @ a) / denom
            ok = inside & np.isfinite(z) & (z > 0)
            region = depth[v0:v1 + 1, u0:u1 + 1]
            closer = ok & (z < region)
            if not closer.any():
                continue
            region[closer] = z[closer]
            ids[v0:v1 + 1, u0:u1 + 1][closer] = m_idx
            cosine = np.abs(denom[closer]) / (np.linalg.norm(normal) * np.linalg.norm(rays[closer], axis=-1))
            shade = 0.35 + 0.65 * cosine
            rgb[v0:v1 + 1, u0:u1 + 1][closer] = colors[f_idx] * shade[:, None]
    depth[~np.isfinite(depth)] = 0.0
    return np.clip(rgb, 0.0, 1.0), depth, ids


def look_rotation(azimuth: float, elevation: float, roll: float) -> np.ndarray:
    """Object-to-camera rotation that views the object from the given
    azimuth/elevation (radians), then spins it by ``roll`` about the optical axis."""
    view = np.array([np.cos(elevation) * np.cos(azimuth),
                     np.cos(elevation) * np.sin(azimuth),
                     np.sin(elevation)])
    # camera z axis points from the camera towards the object: -view in object frame
    z = -view
    helper = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.99 else np.array([1.0, 0.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_cam_from_obj = np.stack([x, y, z])
    return rodrigues(np.array([0.0, 0.0, roll])) @ R_cam_from_obj


def _background(rng: np.random.Generator, hw: tuple) -> np.ndarray:
    h, w = hw
    if rng.random() < 0.5:
        return np.broadcast_to(rng.uniform(0.0, 1.0, 3), (h, w, 3)).copy()
    return rng.uniform(0.0, 1.0, (h, w, 3))


def _sample_pose(rng: np.random.Generator, mesh: MeshModel, K: Intrinsics, ranges: SynthRanges) -> Pose:
    h, w = ranges.image_hw
    az = np.deg2rad(rng.uniform(*ranges.azimuth_deg))
    el = np.deg2rad(rng.uniform(*ranges.elevation_deg))
    roll = rng.uniform(-np.pi, np.pi)
    dist = rng.uniform(*ranges.distance_mm)
    u = rng.uniform(0, w - 1)
    v = rng.uniform(0, h - 1)
    ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    return Pose(look_rotation(az, el, roll), dist * ray / np.linalg.norm(ray))


def _inside_image(uv: np.ndarray, hw: tuple) -> bool:
    h, w = hw
    return bool(np.all(uv[:, 0] >= 0) and np.all(uv[:, 0] <= w - 1)
                and np.all(uv[:, 1] >= 0) and np.all(uv[:, 1] <= h - 1))


def generate_scene(meshes: Sequence[MeshModel], rng: np.random.Generator, ranges: SynthRanges,
                   image_id: int = 0, scene_id: int = 0) -> SceneSample:
    """One scene with between ``objects_per_scene`` bounds of distinct classes.

    A placement is redrawn when the object's projected bounding box leaves
    the image or when occlusion hides more than ``1 - min_visible_fraction``
    of any object.
    """
    hw = ranges.image_hw
    f = rng.uniform(*ranges.focal)
    K = Intrinsics(f, f, hw[1] / 2, hw[0] / 2)
    lo, hi = ranges.objects_per_scene
    count = int(rng.integers(lo, min(hi, len(meshes)) + 1))
    chosen = [meshes[i] for i in sorted(rng.choice(len(meshes), count, replace=False))]
    background = _background(rng, hw)

    for _ in range(ranges.max_retries):
        poses = []
        for mesh in chosen:
            for _ in range(ranges.max_retries):
                pose = _sample_pose(rng, mesh, K, ranges)
                if _inside_image(project(mesh.box_corners(), pose, K), hw):
                    break
            else:
                raise RuntimeError(f"could not place mesh {mesh.name} inside the image")
            poses.append(pose)
        rgb, depth, ids = render(chosen, poses, K, hw, background)
        alone = [np.count_nonzero(render([m], [p], K, hw)[2] == 0) for m, p in zip(chosen, poses)]
        visible = [np.count_nonzero(ids == i) for i in range(len(chosen))]
        if all(a > 0 and v >= ranges.min_visible_fraction * a for a, v in zip(alone, visible)):
            break
    else:
        raise RuntimeError("could not find a scene layout with sufficiently visible objects")

    objects = []
    for i, (mesh, pose) in enumerate(zip(chosen, poses)):
        uv = project(mesh.vertices, pose, K)
        box = np.concatenate([uv.min(axis=0), uv.max(axis=0)])
        objects.append(ObjectAnnotation(mesh.class_id, pose, box, ids == i,
                                        project(mesh.box_corners(), pose, K)))
    return SceneSample(rgb.astype(np.float32), K, objects, depth.astype(np.float32), scene_id, image_id)


def synth_generate(meshes: Sequence[MeshModel], n: int, ranges: SynthRanges = None,
                   seed: int = 0) -> list[SceneSample]:
    """``n`` scenes; scene ``i`` draws from its own stream spawned from ``seed``."""
    ranges = ranges or SynthRanges()
    streams = np.random.SeedSequence(seed).spawn(n)
    return [generate_scene(meshes, np.random.default_rng(s), ranges, image_id=i)
            for i, s in enumerate(streams)]
