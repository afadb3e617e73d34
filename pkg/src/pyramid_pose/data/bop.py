"""Reading and writing scenes in the BOP directory convention.

Layout of one scene directory ``<root>/<scene_id:06d>/``::

    scene_camera.json   {im_id: {"cam_K": [9 floats, row-major], "depth_scale": s}}
    scene_gt.json       {im_id: [{"cam_R_m2c": [9], "cam_t_m2c": [3], "obj_id": k}, ...]}
    scene_gt_info.json  {im_id: [{"bbox_obj": [x, y, w, h]}, ...]}        (optional)
    rgb/<im_id:06d>.png
    depth/<im_id:06d>.png           uint16, millimetres = value * depth_scale   (optional)
    mask_visib/<im_id:06d>_<k:06d>.png                                          (optional)

Models live in ``<root>/models/obj_<id:06d>.ply`` with ``models_info.json``.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from ..geometry import Intrinsics, Pose, orthonormalize, project
from .mesh import MeshModel, read_ply, write_ply
from .synth import ObjectAnnotation, SceneSample, render

DEFAULT_DEPTH_SCALE = 0.1


class BopFormatError(ValueError):
    pass


def _scene_dir(root, scene_id: int) -> Path:
    return Path(root) / f"{scene_id:06d}"


def _load_json(path: Path) -> dict:
    if not path.exists():
        raise BopFormatError(f"{path}: file not found")
    text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        keys = re.findall(r'"(\d+)"\s*:', text[:e.pos])
        where = f" (last complete key before the error: image {keys[-1]})" if keys else ""
        raise BopFormatError(f"{path}: malformed JSON at offset {e.pos}{where}: {e.msg}") from None


def _field(record: dict, key: str, size: int, path: Path, where: str) -> np.ndarray:
    if key not in record:
        raise BopFormatError(f"{path}: {where}: missing key '{key}'")
    try:
        arr = np.asarray(record[key], dtype=np.float64).reshape(-1)
    except (TypeError, ValueError):
        raise BopFormatError(f"{path}: {where}.{key}: not numeric") from None
    if arr.size != size:
        raise BopFormatError(f"{path}: {where}.{key}: expected {size} values, got {arr.size}")
    return arr


def _read_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise BopFormatError(f"{path}: file not found")
    return np.asarray(Image.open(path))


# -- models ------------------------------------------------------------------

def write_models(root, meshes: Sequence[MeshModel]) -> None:
    mdir = Path(root) / "models"
    info = {}
    for m in meshes:
        write_ply(mdir / f"obj_{m.class_id:06d}.ply", m)
        info[str(m.class_id)] = {"diameter": m.diameter, "symmetric": bool(m.symmetric), "name": m.name}
    (mdir / "models_info.json").write_text(json.dumps(info, indent=2, sort_keys=True))


def load_models(root) -> dict[int, MeshModel]:
    mdir = Path(root) / "models"
    info = _load_json(mdir / "models_info.json")
    out = {}
    for key, rec in info.items():
        cid = int(key)
        mesh = read_ply(mdir / f"obj_{cid:06d}.ply", cid, symmetric=bool(rec.get("symmetric", False)))
        mesh.name = rec.get("name", mesh.name)
        out[cid] = mesh
    return out


# -- scenes ------------------------------------------------------------------

def write_bop_scene(root, scene_id: int, samples: Sequence[SceneSample],
                    depth_scale: float = DEFAULT_DEPTH_SCALE) -> None:
    """Persist samples; rgb is quantised to 8 bit and depth to ``depth_scale`` mm."""
    sdir = _scene_dir(root, scene_id)
    for sub in ("rgb", "depth", "mask_visib"):
        (sdir / sub).mkdir(parents=True, exist_ok=True)
    cams, gts, infos = {}, {}, {}
    for s in samples:
        key = str(s.image_id)
        cams[key] = {"cam_K": s.K.K.reshape(-1).tolist(), "depth_scale": depth_scale}
        gts[key] = [{"cam_R_m2c": o.pose.R.reshape(-1).tolist(), "cam_t_m2c": o.pose.t.tolist(),
                     "obj_id": int(o.class_id)} for o in s.objects]
        infos[key] = [{"bbox_obj": [float(o.box[0]), float(o.box[1]),
                                    float(o.box[2] - o.box[0]), float(o.box[3] - o.box[1])]}
                      for o in s.objects]
        name = f"{s.image_id:06d}"
        Image.fromarray(np.round(np.clip(s.rgb, 0, 1) * 255).astype(np.uint8)).save(sdir / "rgb" / f"{name}.png")
        if s.depth is not None:
            d = np.round(np.asarray(s.depth, dtype=np.float64) / depth_scale)
            if d.max() > np.iinfo(np.uint16).max:
                raise BopFormatError(f"depth of image {s.image_id} exceeds the 16-bit range at scale {depth_scale}")
            Image.fromarray(d.astype(np.uint16)).save(sdir / "depth" / f"{name}.png")
        for k, o in enumerate(s.objects):
            Image.fromarray(o.mask.astype(np.uint8) * 255).save(sdir / "mask_visib" / f"{name}_{k:06d}.png")
    (sdir / "scene_camera.json").write_text(json.dumps(cams, indent=1))
    (sdir / "scene_gt.json").write_text(json.dumps(gts, indent=1))
    (sdir / "scene_gt_info.json").write_text(json.dumps(infos, indent=1))


def _file_pose(R, t, path, where) -> Pose:
    """Stored rotations may carry only a few decimals: snap slightly
    non-orthonormal ones to the nearest rotation, keep exact ones verbatim and
    reject matrices that are not rotations at all."""
    R = np.asarray(R, dtype=np.float64)
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > 1e-3 or np.linalg.det(R) < 0:
        raise BopFormatError(f"{path}: {where}: cam_R_m2c is not a rotation matrix")
    if err > 1e-7 or abs(np.linalg.det(R) - 1) > 1e-7:
        R = orthonormalize(R)
    return Pose(R, t)


def load_bop_scene(root, scene_id: int, meshes: Optional[dict] = None) -> list[SceneSample]:
    """Load every image of one scene.

    ``meshes`` maps object ids to :class:`MeshModel`; when omitted the models
    directory under ``root`` is read.  Meshes provide the projected 3D box
    corners and, when a mask or box annotation is absent, the rasterised mask
    and tight projected box.
    """
    sdir = _scene_dir(root, scene_id)
    if not sdir.is_dir():
        raise BopFormatError(f"{sdir}: scene directory not found")
    if meshes is None:
        meshes = load_models(root)
    cam_path, gt_path, info_path = sdir / "scene_camera.json", sdir / "scene_gt.json", sdir / "scene_gt_info.json"
    cams = _load_json(cam_path)
    gts = _load_json(gt_path)
    infos = _load_json(info_path) if info_path.exists() else {}

    samples = []
    for key in sorted(cams, key=int):
        cam = cams[key]
        K = Intrinsics.from_matrix(_field(cam, "cam_K", 9, cam_path, key))
        scale = float(cam.get("depth_scale", 1.0))
        if key not in gts:
            raise BopFormatError(f"{gt_path}: no ground truth for image {key}")
        records = gts[key]
        if not isinstance(records, list):
            raise BopFormatError(f"{gt_path}: {key}: expected a list of object records")
        name = f"{int(key):06d}"
        rgb = _read_png(sdir / "rgb" / f"{name}.png")
        if rgb.ndim != 3 or rgb.shape[2] < 3:
            raise BopFormatError(f"{sdir / 'rgb' / name}.png: expected an RGB image")
        rgb = rgb[..., :3].astype(np.float32) / 255.0
        hw = rgb.shape[:2]
        depth_path = sdir / "depth" / f"{name}.png"
        depth = _read_png(depth_path).astype(np.float64) * scale if depth_path.exists() else None

        objects = []
        for k, rec in enumerate(records):
            where = f"{key}[{k}]"
            R = _field(rec, "cam_R_m2c", 9, gt_path, where).reshape(3, 3)
            t = _field(rec, "cam_t_m2c", 3, gt_path, where)
            if "obj_id" not in rec:
                raise BopFormatError(f"{gt_path}: {where}: missing key 'obj_id'")
            cid = int(rec["obj_id"])
            if cid not in meshes:
                raise BopFormatError(f"{gt_path}: {where}: no model for object id {cid}")
            mesh = meshes[cid]
            pose = _file_pose(R, t, gt_path, where)
            mask_path = sdir / "mask_visib" / f"{name}_{k:06d}.png"
            if mask_path.exists():
                mask = _read_png(mask_path) > 0
            else:
                mask = _visible_mask([meshes[int(r["obj_id"])] for r in records],
                                     [_file_pose(np.reshape(r["cam_R_m2c"], (3, 3)), r["cam_t_m2c"], gt_path, key)
                                      for r in records],
                                     K, hw, k)
            info = infos.get(key, [])
            if k < len(info) and "bbox_obj" in info[k]:
                x, y, bw, bh = _field(info[k], "bbox_obj", 4, info_path, where)
                box = np.array([x, y, x + bw, y + bh])
            else:
                uv = project(mesh.vertices, pose, K)
                box = np.concatenate([uv.min(axis=0), uv.max(axis=0)])
            objects.append(ObjectAnnotation(cid, pose, box, mask, project(mesh.box_corners(), pose, K)))
        samples.append(SceneSample(rgb, K, objects, None if depth is None else depth.astype(np.float32),
                                   scene_id, int(key)))
    return samples


def _visible_mask(meshes, poses, K, hw, index) -> np.ndarray:
    _, _, ids = render(meshes, poses, K, hw)
    return ids == index
