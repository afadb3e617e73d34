"""Quick built-in health checks: gradients, oracle equivalences and
geometry round-trips across the package.  Runs in well under a minute."""

from __future__ import annotations

import time
import traceback
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from . import tensor as T
from .anchors import assign_targets, decode_correspondences, encode_correspondences, generate_anchors, iou_matrix
from .checkpoint import load_checkpoint, save_checkpoint
from .geometry import Intrinsics, Pose, backproject, project, random_rotation, rotation_distance
from .gradcheck import check_gradients
from .icp import icp_refine
from .losses import CorrLossConfig, FocalConfig, corr_loss, location_loss, mask_loss
from .metrics import add_score, adds_score, model_diameter
from .pnp import ransac_pnp

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def _leaf(rng, *shape, low=-1.0, high=1.0):
    return T.Tensor(rng.uniform(low, high, shape), requires_grad=True)


def check_op_gradients() -> str:
    rng = np.random.default_rng(1)
    cases = {
        "conv2d": lambda: ((_leaf(rng, 2, 3, 6, 6), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)),
                           lambda t: T.total(T.conv2d(t[0], t[1], t[2], padding=1))),
        "relu": lambda: ((_leaf(rng, 1, 2, 4, 4),), lambda t: T.total(T.relu(t[0]))),
        "sigmoid": lambda: ((_leaf(rng, 1, 2, 4, 4),), lambda t: T.total(T.sigmoid(t[0]))),
        "add": lambda: ((_leaf(rng, 1, 2, 3, 3), _leaf(rng, 1, 2, 3, 3)),
                        lambda t: T.total(T.relu(T.add(t[0], t[1])))),
        "up2": lambda: ((_leaf(rng, 1, 2, 3, 3),), lambda t: T.total(T.sigmoid(T.up2(t[0])))),
        "down2": lambda: ((_leaf(rng, 1, 2, 4, 4),), lambda t: T.total(T.sigmoid(T.down2(t[0])))),
    }
    worst = {}
    for name, make in cases.items():
        inputs, build = make()
        worst[name] = check_gradients(build, inputs)
    bad = {k: v for k, v in worst.items() if not v < GRAD_TOL}
    if bad:
        raise AssertionError(f"gradient errors above {GRAD_TOL}: {bad}")
    return f"max rel. err {max(worst.values()):.1e}"


def check_loss_gradients() -> str:
    rng = np.random.default_rng(2)
    anchors = generate_anchors((64, 64))
    box = np.array([10.0, 12.0, 50.0, 48.0])
    corners = rng.uniform(10, 50, (8, 2))
    asg = [assign_targets(anchors, [(1, box, corners)])]
    level_shapes = [(1, 9 * c, g[0], g[1]) for g in anchors.grid for c in (1,)]
    corr_shapes = [(1, 9 * 16, g[0], g[1]) for g in anchors.grid]
    scores = [T.Tensor(rng.uniform(0.05, 0.95, s), requires_grad=True) for s in level_shapes]
    corr = [T.Tensor(rng.normal(0, 1, s), requires_grad=True) for s in corr_shapes]
    mask = T.Tensor(rng.uniform(0.05, 0.95, (1, 1, 8, 8)), requires_grad=True)
    target = (rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64)
    errs = [
        check_gradients(lambda t: location_loss(t, asg, 1, FocalConfig()), scores),
        check_gradients(lambda t: corr_loss(t, asg, anchors.boxes, CorrLossConfig()), corr),
        check_gradients(lambda t: mask_loss(t[0], target, FocalConfig()), [mask]),
    ]
    if not max(errs) < GRAD_TOL:
        raise AssertionError(f"loss gradient errors {errs}")
    return f"max rel. err {max(errs):.1e}"


def check_metric_oracles() -> str:
    rng = np.random.default_rng(3)
    pts = rng.normal(0, 50, (300, 3))
    a, b = Pose(random_rotation(rng), rng.normal(0, 20, 3)), Pose(random_rotation(rng), rng.normal(0, 20, 3))
    pa, pb = a.apply(pts), b.apply(pts)
    add_ref = np.mean(np.linalg.norm(pa - pb, axis=1))
    adds_ref = np.mean(cdist(pb, pa).min(axis=1))
    diam_ref = cdist(pts, pts).max()
    for got, ref, what in ((add_score(pts, a, b), add_ref, "add"), (adds_score(pts, a, b), adds_ref, "adds"),
                           (model_diameter(pts), diam_ref, "diameter")):
        if abs(got - ref) > 1e-9 * max(1.0, abs(ref)):
            raise AssertionError(f"{what}: {got} vs oracle {ref}")
    return "add, adds and diameter match brute force"


def check_anchor_oracle() -> str:
    rng = np.random.default_rng(4)
    anchors = generate_anchors((96, 128))
    gt = []
    for cls in (1, 2):
        x, y = rng.uniform(0, 80, 2)
        w, h = rng.uniform(20, 60, 2)
        gt.append((cls, np.array([x, y, x + w, y + h]), rng.uniform(0, 128, (8, 2))))
    asg = assign_targets(anchors, gt)
    ious = iou_matrix(anchors.boxes, np.array([g[1] for g in gt]))
    for i in range(len(anchors)):
        best = int(np.argmax(ious[i]))
        want = gt[best][0] if ious[i, best] > 0.5 else 0
        if asg.labels[i] != want:
            raise AssertionError(f"anchor {i}: label {asg.labels[i]}, oracle {want}")
    enc = encode_correspondences(gt[0][2], anchors.boxes[0])
    err = np.abs(decode_correspondences(enc, anchors.boxes[0]) - gt[0][2]).max()
    if err > 1e-6:
        raise AssertionError(f"encode/decode round trip error {err}")
    return f"{len(anchors)} anchors agree"


def check_geometry() -> str:
    rng = np.random.default_rng(5)
    K = Intrinsics(500.0, 500.0, 320.0, 240.0)
    pose = Pose(random_rotation(rng), np.array([10.0, -20.0, 800.0]))
    pts = rng.uniform(-60, 60, (24, 3))
    uv = project(pts, pose, K)
    depth = np.zeros((480, 640))
    u, v = np.round(uv).astype(int).T
    z = pose.apply(pts)[:, 2]
    depth[v, u] = z
    mask = depth > 0
    back = backproject(depth, mask, K)
    recon = np.stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z], axis=1)
    if not np.allclose(np.sort(back, axis=0), np.sort(recon, axis=0)):
        raise AssertionError("backprojection disagrees with the pinhole model")
    res = ransac_pnp(uv, pts, K)
    if rotation_distance(res.pose.R, pose.R) > 1e-4 or np.linalg.norm(res.pose.t - pose.t) > 1e-2:
        raise AssertionError("ransac_pnp failed to recover a noiseless pose")
    model = rng.uniform(-50, 50, (400, 3)) * np.array([1.0, 0.6, 0.3])
    perturbed = Pose(pose.R, pose.t + np.array([2.0, -1.0, 1.5]))
    out = icp_refine(model, pose.apply(model), perturbed)
    if np.linalg.norm(out.pose.t - pose.t) > 0.5:
        raise AssertionError("ICP did not remove a small translation offset")
    return "projection, backprojection, PnP and ICP round trips"


def check_checkpoint(tmpdir: Optional[str] = None) -> str:
    import tempfile
    from pathlib import Path

    rng = np.random.default_rng(6)
    params = {"a.weight": rng.normal(size=(3, 2, 3, 3)).astype(np.float32), "a.bias": np.zeros(3, np.float32)}
    with tempfile.TemporaryDirectory(dir=tmpdir) as d:
        path = Path(d) / "x.ckpt"
        save_checkpoint(path, params, {"k": 1})
        back, meta = load_checkpoint(path)
    if meta != {"k": 1} or any(not np.array_equal(params[k], back[k]) for k in params):
        raise AssertionError("checkpoint round trip changed the data")
    return "save/load round trip exact"


CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("op gradients", check_op_gradients),
    ("loss gradients", check_loss_gradients),
    ("metric oracles", check_metric_oracles),
    ("anchor oracle", check_anchor_oracle),
    ("geometry round trips", check_geometry),
    ("checkpoint", check_checkpoint),
]


def run_selftest(checks: Sequence[tuple[str, Callable[[], str]]] = None) -> list[CheckResult]:
    out = []
    for name, fn in (checks if checks is not None else CHECKS):
        t0 = time.perf_counter()
        try:
            detail = fn() or ""
            ok = True
        except Exception as e:  # a failing check must not stop the others
            detail = f"{type(e).__name__}: {e}"
            ok = False
            traceback.print_exc()
        out.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return out


def format_results(results: Sequence[CheckResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} {r.seconds:6.2f}s  {r.detail}" for r in results]
    lines.append(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return "\n".join(lines)
