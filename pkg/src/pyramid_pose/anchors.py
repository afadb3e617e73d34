"""Anchor priors, IoU-based target assignment and corner encoding.

Anchors are stored as a flat ``(N, 4)`` array of ``x1, y1, x2, y2`` in
image pixels, ordered level-major, then row-major over the level grid, then
by (scale, ratio).  That order matches the channel layout of the head
outputs after :func:`flatten_head_output`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEVELS = ("P3", "P4", "P5")
LEVEL_STRIDES = (8, 16, 32)

# corner k of a 3D box takes max along axis a when bit a of k is set
# (bit 0 = x, bit 1 = y, bit 2 = z)
CORNER_BITS = np.array([[(k >> a) & 1 for a in range(3)] for k in range(8)], dtype=np.int64)
BOX_EDGES = tuple(
    (i, j) for i in range(8) for j in range(i + 1, 8) if bin(i ^ j).count("1") == 1
)


@dataclass
class AnchorSpec:
    sizes: tuple = (32.0, 64.0, 128.0)
    scales: tuple = (2.0 ** 0, 2.0 ** (1 / 3), 2.0 ** (2 / 3))
    ratios: tuple = (0.5, 1.0, 2.0)

    @property
    def per_location(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass
class Anchors:
    boxes: np.ndarray          # (N, 4)
    level: np.ndarray          # (N,) index into LEVELS
    grid: list                 # per level (rows, cols)

    def __len__(self) -> int:
        return len(self.boxes)

    def level_slices(self) -> list[slice]:
        out, start = [], 0
        for lv in range(len(self.grid)):
            n = int(np.sum(self.level == lv))
            out.append(slice(start, start + n))
            start += n
        return out


@dataclass
class TargetAssignment:
    labels: np.ndarray                   # (N,) 0 = background, 1..K = class
    positive: np.ndarray                 # (N,) bool
    gt_index: np.ndarray                 # (N,) assigned GT index or -1
    max_iou: np.ndarray                  # (N,)
    corr_targets: np.ndarray             # (N, 16) normalised, zero for negatives
    gt_corners: np.ndarray = field(default=None)  # (N, 8, 2) pixel corners for positives

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def box_corners(extent_min, extent_max) -> np.ndarray:
    """8x3 corners of the axis-aligned box in canonical bit order."""
    lo = np.asarray(extent_min, dtype=np.float64)
    hi = np.asarray(extent_max, dtype=np.float64)
    return np.where(CORNER_BITS == 1, hi, lo)


def _base_shapes(size: float, spec: AnchorSpec) -> np.ndarray:
    """(A, 2) anchor width/height at one level, (scale, ratio) order; ratio = h / w."""
    wh = []
    for s in spec.scales:
        side = size * s
        for r in spec.ratios:
            wh.append((side / np.sqrt(r), side * np.sqrt(r)))
    return np.array(wh)


def generate_anchors(image_hw: tuple, spec: AnchorSpec = None) -> Anchors:
    spec = spec or AnchorSpec()
    h, w = image_hw
    if h % 32 or w % 32:
        raise ValueError(f"image extents {h}x{w} must be divisible by 32")
    boxes, level, grid = [], [], []
    for lv, (stride, size) in enumerate(zip(LEVEL_STRIDES, spec.sizes)):
        rows, cols = h // stride, w // stride
        wh = _base_shapes(size, spec)
        cy, cx = np.meshgrid((np.arange(rows) + 0.5) * stride, (np.arange(cols) + 0.5) * stride, indexing="ij")
        centers = np.stack([cx.ravel(), cy.ravel()], axis=1)  # row-major
        c = centers[:, None, :]
        half = wh[None, :, :] / 2
        b = np.concatenate([c - half, c + half], axis=2).reshape(-1, 4)
        boxes.append(b)
        level.append(np.full(len(b), lv))
        grid.append((rows, cols))
    return Anchors(np.concatenate(boxes), np.concatenate(level), grid)


def iou(a, b) -> float:
    """IoU of two ``x1, y1, x2, y2`` boxes."""
    return float(iou_matrix(np.asarray(a, float)[None], np.asarray(b, float)[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, (N, 4) x (M, 4) -> (N, M)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def encode_correspondences(corners2d: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """(..., 8, 2) pixel corners -> (..., 16) offsets normalised by the anchor box."""
    corners2d = np.asarray(corners2d, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    x1, y1 = anchor[..., 0:1], anchor[..., 1:2]
    aw, ah = anchor[..., 2:3] - x1, anchor[..., 3:4] - y1
    tx = (corners2d[..., 0] - x1) / aw
    ty = (corners2d[..., 1] - y1) / ah
    return np.stack([tx, ty], axis=-1).reshape(*corners2d.shape[:-2], 16)


def decode_correspondences(pred: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_correspondences`: (..., 16) -> (..., 8, 2)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(*np.shape(pred)[:-1], 8, 2)
    anchor = np.asarray(anchor, dtype=np.float64)
    x1, y1 = anchor[..., 0:1], anchor[..., 1:2]
    aw, ah = anchor[..., 2:3] - x1, anchor[..., 3:4] - y1
    return np.stack([pred[..., 0] * aw + x1, pred[..., 1] * ah + y1], axis=-1)


def assign_targets(anchors, gt: list, threshold: float = 0.5) -> TargetAssignment:
    """Label anchors against ground-truth objects.

    ``gt`` holds ``(class_id, box2d, corners2d)`` tuples with class ids >= 1.
    An anchor is positive iff its best IoU is strictly above ``threshold``;
    ties go to the lowest GT index.  Everything else is background.
    """
    boxes = anchors.boxes if isinstance(anchors, Anchors) else np.asarray(anchors, dtype=np.float64)
    n = len(boxes)
    if n == 0:
        raise ValueError("assign_targets: empty anchor list")
    labels = np.zeros(n, dtype=np.int64)
    gt_index = np.full(n, -1, dtype=np.int64)
    corr = np.zeros((n, 16))
    gt_corners = np.zeros((n, 8, 2))
    if not gt:
        return TargetAssignment(labels, np.zeros(n, bool), gt_index, np.zeros(n), corr, gt_corners)
    gt_boxes = np.array([g[1] for g in gt], dtype=np.float64)
    ious = iou_matrix(boxes, gt_boxes)
    best = np.argmax(ious, axis=1)  # first maximum -> lowest GT index
    best_iou = ious[np.arange(n), best]
    pos = best_iou > threshold
    idx = np.nonzero(pos)[0]
    cls = np.array([g[0] for g in gt], dtype=np.int64)
    corners = np.array([np.asarray(g[2], dtype=np.float64) for g in gt])
    labels[idx] = cls[best[idx]]
    gt_index[idx] = best[idx]
    gt_corners[idx] = corners[best[idx]]
    corr[idx] = encode_correspondences(gt_corners[idx], boxes[idx])
    return TargetAssignment(labels, pos, gt_index, best_iou, corr, gt_corners)


def flatten_head_output(x: np.ndarray, per_anchor: int) -> np.ndarray:
    """(N, A*D, H, W) -> (N, H*W*A, D) in anchor order."""
    n, c, h, w = x.shape
    a = c // per_anchor
    return x.reshape(n, a, per_anchor, h, w).transpose(0, 3, 4, 1, 2).reshape(n, h * w * a, per_anchor)


def unflatten_head_grad(g: np.ndarray, shape: tuple, per_anchor: int) -> np.ndarray:
    """Inverse of :func:`flatten_head_output` for gradients."""
    n, c, h, w = shape
    a = c // per_anchor
    return g.reshape(n, h, w, a, per_anchor).transpose(0, 3, 4, 1, 2).reshape(shape)
