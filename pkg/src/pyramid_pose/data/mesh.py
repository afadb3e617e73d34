"""Triangle meshes: construction, surface sampling and ASCII PLY I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..anchors import box_corners

SCORING_SAMPLES = 2000

# two triangles per face, outward winding, corner indices in canonical bit order
_CUBOID_FACES = np.array([
    [0, 6, 2], [0, 4, 6],   # -x
    [1, 7, 5], [1, 3, 7],   # +x
    [0, 5, 4], [0, 1, 5],   # -y
    [2, 7, 3], [2, 6, 7],   # +y
    [0, 3, 1], [0, 2, 3],   # -z
    [4, 7, 6], [4, 5, 7],   # +z
])


@dataclass
class MeshModel:
    class_id: int
    vertices: np.ndarray               # (V, 3) mm
    faces: np.ndarray                  # (F, 3) int
    symmetric: bool = False
    face_colors: Optional[np.ndarray] = None  # (F, 3) in [0, 1]
    name: str = ""
    diameter: float = field(init=False)
    scoring_points: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        from ..metrics import model_diameter

        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.face_colors is not None:
            self.face_colors = np.asarray(self.face_colors, dtype=np.float64)
        self.diameter = model_diameter(self.vertices)
        self.scoring_points = self.sample_surface(SCORING_SAMPLES) if len(self.faces) else self.vertices

    @property
    def extent_min(self) -> np.ndarray:
        return self.vertices.min(axis=0)

    @property
    def extent_max(self) -> np.ndarray:
        return self.vertices.max(axis=0)

    def box_corners(self) -> np.ndarray:
        """8x3 corners of the axis-aligned bounding box, canonical order."""
        return box_corners(self.extent_min, self.extent_max)

    def sample_surface(self, n: int, seed: int = 0) -> np.ndarray:
        """Area-weighted deterministic surface samples."""
        rng = np.random.default_rng(seed)
        tri = self.vertices[self.faces]
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        f = rng.choice(len(tri), n, p=area / area.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        a, b, c = tri[f, 0], tri[f, 1], tri[f, 2]
        return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def cuboid(class_id: int, size, face_colors=None, name: str = "") -> MeshModel:
    """Axis-aligned box centred on the origin with extents ``size`` (mm)."""
    half = np.asarray(size, dtype=np.float64) / 2
    if face_colors is not None:
        face_colors = np.repeat(np.asarray(face_colors, dtype=np.float64), 2, axis=0)
    return MeshModel(class_id, box_corners(-half, half), _CUBOID_FACES.copy(),
                     face_colors=face_colors, name=name or f"cuboid_{class_id}")


def default_objects() -> list[MeshModel]:
    """The two desk-scale cuboids used by the generator and benchmarks.

    Every face carries its own colour so that the box orientation is visible
    in the image.
    """
    colors_a = [[0.85, 0.20, 0.15], [0.95, 0.75, 0.20], [0.20, 0.55, 0.85],
                [0.30, 0.80, 0.35], [0.60, 0.25, 0.70], [0.95, 0.95, 0.90]]
    colors_b = [[0.10, 0.35, 0.30], [0.80, 0.45, 0.60], [0.95, 0.55, 0.10],
                [0.45, 0.40, 0.95], [0.55, 0.85, 0.85], [0.25, 0.20, 0.15]]
    return [
        cuboid(1, (200.0, 120.0, 80.0), colors_a, "box_a"),
        cuboid(2, (150.0, 90.0, 130.0), colors_b, "box_b"),
    ]


def write_ply(path, mesh: MeshModel) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    colored = mesh.face_colors is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}",
             "property float x", "property float y", "property float z",
             f"element face {len(mesh.faces)}", "property list uchar int vertex_indices"]
    if colored:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for v in mesh.vertices:
        lines.append(" ".join(repr(float(x)) for x in v))
    for i, f in enumerate(mesh.faces):
        row = f"3 {f[0]} {f[1]} {f[2]}"
        if colored:
            rgb = np.round(mesh.face_colors[i] * 255).astype(int)
            row += f" {rgb[0]} {rgb[1]} {rgb[2]}"
        lines.append(row)
    path.write_text("\n".join(lines) + "\n")


def read_ply(path, class_id: int, symmetric: bool = False) -> MeshModel:
    """ASCII PLY with triangle faces and optional per-face uchar colours."""
    path = Path(path)
    text = path.read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    nv = nf = 0
    face_props: list[str] = []
    current = None
    i = 1
    while i < len(text) and text[i].strip() != "end_header":
        tok = text[i].split()
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError(f"{path}: only ascii PLY is supported")
        if tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                nv = int(tok[2])
            elif current == "face":
                nf = int(tok[2])
        elif tok[0] == "property" and current == "face" and tok[1] != "list":
            face_props.append(tok[-1])
        i += 1
    body = text[i + 1:]
    if len(body) < nv + nf:
        raise ValueError(f"{path}: expected {nv} vertices and {nf} faces, file is truncated")
    verts = np.array([[float(x) for x in body[k].split()[:3]] for k in range(nv)])
    faces, colors = [], []
    for k in range(nf):
        tok = body[nv + k].split()
        if int(tok[0]) != 3:
            raise ValueError(f"{path}: face {k} is not a triangle")
        faces.append([int(x) for x in tok[1:4]])
        if face_props:
            colors.append([int(x) / 255 for x in tok[4:7]])
    return MeshModel(class_id, verts, np.array(faces), symmetric=symmetric,
                     face_colors=np.array(colors) if colors else None, name=path.stem)
