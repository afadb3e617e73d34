"""Perspective-n-point: EPnP minimal solver, planar homography fallback,
Levenberg-Marquardt refinement and the RANSAC wrapper."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GeometryError, Intrinsics, Pose, orthonormalize, rodrigues

_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
PLANAR_TOL = 1e-3


class PnPError(GeometryError):
    """Raised when no pose can be recovered."""


@dataclass
class RansacConfig:
    iterations: int = 300
    sample_size: int = 4
    inlier_px: float = 5.0
    min_inliers: int = 6
    seed: int = 0
    refine: bool = True


@dataclass
class PnPResult:
    pose: Pose
    inliers: np.ndarray        # bool mask over the input correspondences
    rms_px: float

    @property
    def num_inliers(self) -> int:
        return int(self.inliers.sum())


def reprojection_errors(uv: np.ndarray, pts3d: np.ndarray, pose: Pose, K: Intrinsics) -> np.ndarray:
    X = pts3d @ pose.R.T + pose.t
    z = X[:, 2]
    err = np.full(len(X), np.inf)
    ok = z > 1e-9
    u = K.fx * X[ok, 0] / z[ok] + K.cx
    v = K.fy * X[ok, 1] / z[ok] + K.cy
    err[ok] = np.hypot(u - uv[ok, 0], v - uv[ok, 1])
    return err


# -- minimal solvers ----------------------------------------------------------
#
# The solvers work on stacks of samples, (B, n, ...), so RANSAC can evaluate
# all its hypotheses in a handful of vectorised calls.  Each returns
# (R (B,3,3), t (B,3), ok (B,)); rows with ok == False carry garbage.

def _batch_kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ms = src.mean(axis=1, keepdims=True)
    md = dst.mean(axis=1, keepdims=True)
    H = np.swapaxes(src - ms, 1, 2) @ (dst - md)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, 1, 2) @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1
    D = np.zeros_like(H)
    D[:, 0, 0] = 1
    D[:, 1, 1] = 1
    D[:, 2, 2] = d
    R = np.swapaxes(Vt, 1, 2) @ D @ np.swapaxes(U, 1, 2)
    t = md[:, 0] - np.einsum("bij,bj->bi", R, ms[:, 0])
    return R, t


def _batch_reproj(uv: np.ndarray, pts: np.ndarray, R: np.ndarray, t: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Per-point reprojection error; ``pts``/``uv`` are (B, n, .) or shared (n, .)."""
    if pts.ndim == 2:
        X = np.einsum("bij,nj->bni", R, pts) + t[:, None, :]
    else:
        X = np.einsum("bij,bnj->bni", R, pts) + t[:, None, :]
    z = X[..., 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    u = K.fx * X[..., 0] / zs + K.cx
    v = K.fy * X[..., 1] / zs + K.cy
    return np.where(ok, np.hypot(u - uv[..., 0], v - uv[..., 1]), np.inf)


def _betas_vector(b: np.ndarray) -> np.ndarray:
    b0, b1, b2, b3 = np.moveaxis(b, -1, 0)
    return np.stack([b0 * b0, b0 * b1, b1 * b1, b0 * b2, b1 * b2, b2 * b2,
                     b0 * b3, b1 * b3, b2 * b3, b3 * b3], axis=-1)


def _gauss_newton(L: np.ndarray, rho: np.ndarray, betas: np.ndarray, iters: int = 10) -> np.ndarray:
    b = betas.copy()
    for _ in range(iters):
        b0, b1, b2, b3 = (b[:, i:i + 1] for i in range(4))
        J = np.stack([
            2 * b0 * L[..., 0] + b1 * L[..., 1] + b2 * L[..., 3] + b3 * L[..., 6],
            b0 * L[..., 1] + 2 * b1 * L[..., 2] + b2 * L[..., 4] + b3 * L[..., 7],
            b0 * L[..., 3] + b1 * L[..., 4] + 2 * b2 * L[..., 5] + b3 * L[..., 8],
            b0 * L[..., 6] + b1 * L[..., 7] + b2 * L[..., 8] + 2 * b3 * L[..., 9],
        ], axis=-1)
        r = rho - np.einsum("bij,bj->bi", L, _betas_vector(b))
        # normal equations with a tiny relative damping; far cheaper than a batched pinv
        JtJ = np.einsum("bki,bkj->bij", J, J)
        JtJ += (1e-12 * np.trace(JtJ, axis1=1, axis2=2) + 1e-300)[:, None, None] * np.eye(4)
        step = np.linalg.solve(JtJ, np.einsum("bki,bk->bi", J, r)[..., None])[..., 0]
        b = b + step
        moved = np.abs(step) > 1e-12 * (1.0 + np.abs(b))
        if not np.any(moved & np.isfinite(step)):
            break
    return b


def _lstsq(A: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.einsum("bij,bj->bi", np.linalg.pinv(A), y)


def epnp_batch(uv: np.ndarray, pts3d: np.ndarray, K: Intrinsics):
    """EPnP with four control points on a stack of samples."""
    B, n, _ = pts3d.shape
    c0 = pts3d.mean(axis=1)
    centered = pts3d - c0[:, None]
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    ok = s[:, 2] > PLANAR_TOL * s[:, 0]
    s = np.where(ok[:, None], s, 1.0)
    vt = np.where(ok[:, None, None], vt, np.eye(3))
    cw = np.concatenate([c0[:, None], c0[:, None] + (s[..., None] / np.sqrt(n)) * vt], axis=1)  # (B,4,3)
    C = np.swapaxes(cw[:, 1:] - c0[:, None], 1, 2)
    alphas = np.empty((B, n, 4))
    alphas[..., 1:] = np.swapaxes(np.linalg.solve(C, np.swapaxes(centered, 1, 2)), 1, 2)
    alphas[..., 0] = 1 - alphas[..., 1:].sum(axis=-1)

    M = np.zeros((B, 2 * n, 12))
    for j in range(4):
        a = alphas[..., j]
        M[:, 0::2, 3 * j] = a * K.fx
        M[:, 0::2, 3 * j + 2] = a * (K.cx - uv[..., 0])
        M[:, 1::2, 3 * j + 1] = a * K.fy
        M[:, 1::2, 3 * j + 2] = a * (K.cy - uv[..., 1])
    _, vecs = np.linalg.eigh(np.swapaxes(M, 1, 2) @ M)
    V = np.moveaxis(vecs[:, :, :4], 2, 1).reshape(B, 4, 4, 3)  # (B, k, control, xyz), smallest first

    L = np.zeros((B, 6, 10))
    rho = np.zeros((B, 6))
    for r, (a, b) in enumerate(_PAIRS):
        dv = V[:, :, a] - V[:, :, b]                        # (B, 4, 3)
        G = np.einsum("bki,bli->bkl", dv, dv)
        L[:, r] = np.stack([G[:, 0, 0], 2 * G[:, 0, 1], G[:, 1, 1], 2 * G[:, 0, 2], 2 * G[:, 1, 2],
                            G[:, 2, 2], 2 * G[:, 0, 3], 2 * G[:, 1, 3], 2 * G[:, 2, 3], G[:, 3, 3]], axis=1)
        rho[:, r] = np.sum((cw[:, a] - cw[:, b]) ** 2, axis=1)

    cands = []
    x = _lstsq(L[..., [0, 1, 3, 6]], rho)
    b0 = np.sqrt(np.abs(x[:, 0]))
    sg = np.where(x[:, 0] < 0, -1.0, 1.0)
    safe = np.where(b0 > 0, b0, 1.0)
    cands.append(np.stack([b0, sg * x[:, 1] / safe, sg * x[:, 2] / safe, sg * x[:, 3] / safe], axis=1))
    for cols in ([0, 1, 2], [0, 1, 2, 3, 4]):
        x = _lstsq(L[..., cols], rho)
        b0, b1 = np.sqrt(np.abs(x[:, 0])), np.sqrt(np.abs(x[:, 2]))
        sg0 = np.where(x[:, 0] < 0, -1.0, 1.0)
        b0 = np.where(x[:, 1] * sg0 < 0, -b0, b0)
        b2 = x[:, 3] / np.where(b0 != 0, b0, 1.0) if len(cols) == 5 else np.zeros(B)
        cands.append(np.stack([b0, b1, b2, np.zeros(B)], axis=1))

    frame_w_inv = np.linalg.inv(np.swapaxes(cw[:, 1:] - cw[:, :1], 1, 2))
    best_R = np.tile(np.eye(3), (B, 1, 1))
    best_t = np.zeros((B, 3))
    best_err = np.full(B, np.inf)
    for betas in cands:
        betas = _gauss_newton(L, rho, np.nan_to_num(betas))
        cc = np.einsum("bk,bkij->bij", betas, V)
        flip = cc[..., 2].mean(axis=1) < 0
        cc[flip] = -cc[flip]
        # distances alone admit a mirrored configuration on the same rays
        hand = np.linalg.det(np.swapaxes(cc[:, 1:] - cc[:, :1], 1, 2) @ frame_w_inv)
        pc = alphas @ cc
        R, t = _batch_kabsch(pts3d, pc)
        err = _batch_reproj(uv, pts3d, R, t, K).mean(axis=1)
        err = np.where((hand > 0) & np.isfinite(err), err, np.inf)
        better = err < best_err
        best_R[better], best_t[better], best_err[better] = R[better], t[better], err[better]
    return best_R, best_t, ok & np.isfinite(best_err)


def planar_batch(uv: np.ndarray, pts3d: np.ndarray, K: Intrinsics):
    """Pose of coplanar samples from the plane-to-image homography."""
    B, n, _ = pts3d.shape
    c = pts3d.mean(axis=1)
    _, s, vt = np.linalg.svd(pts3d - c[:, None], full_matrices=False)
    ok = s[:, 1] > PLANAR_TOL * s[:, 0]
    b1, b2 = vt[:, 0], vt[:, 1]
    Bm = np.stack([b1, b2, np.cross(b1, b2)], axis=1)       # rows: plane frame axes
    q = np.einsum("bij,bnj->bni", Bm[:, :2], pts3d - c[:, None])
    sq = np.sqrt(np.mean(np.sum(q ** 2, axis=-1), axis=1))
    sq = np.where(sq > 0, sq, 1.0)
    q = q / sq[:, None, None]
    x = np.stack([(uv[..., 0] - K.cx) / K.fx, (uv[..., 1] - K.cy) / K.fy], axis=-1)
    A = np.zeros((B, 2 * n, 9))
    A[:, 0::2, 0:2] = q
    A[:, 0::2, 2] = 1
    A[:, 0::2, 6:8] = -x[..., :1] * q
    A[:, 0::2, 8] = -x[..., 0]
    A[:, 1::2, 3:5] = q
    A[:, 1::2, 5] = 1
    A[:, 1::2, 6:8] = -x[..., 1:] * q
    A[:, 1::2, 8] = -x[..., 1]
    _, _, vh = np.linalg.svd(A)
    H = vh[:, -1].reshape(B, 3, 3)
    H[:, :, :2] /= sq[:, None, None]
    norm = (np.linalg.norm(H[:, :, 0], axis=1) + np.linalg.norm(H[:, :, 1], axis=1)) / 2
    ok &= norm > 1e-12
    H = H / np.where(norm > 0, norm, 1.0)[:, None, None]
    H[H[:, 2, 2] < 0] *= -1
    r1, r2, t = H[:, :, 0], H[:, :, 1], H[:, :, 2]
    M = np.stack([r1, r2, np.cross(r1, r2)], axis=2)
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    d[d == 0] = 1
    U[:, :, 2] *= d[:, None]
    Rp = U @ Vt
    R = Rp @ Bm
    return R, t - np.einsum("bij,bj->bi", R, c), ok


def minimal_pnp_batch(uv: np.ndarray, pts3d: np.ndarray, K: Intrinsics):
    """EPnP for general samples, homography for coplanar ones, reject repeats."""
    B, n, _ = pts3d.shape
    d = np.linalg.norm(pts3d[:, :, None] - pts3d[:, None], axis=-1)
    iu = np.triu_indices(n, 1)
    scale = d.max(axis=(1, 2))
    distinct = (scale > 0) & (d[:, iu[0], iu[1]].min(axis=1) > 1e-6 * scale)
    s = np.linalg.svd(pts3d - pts3d.mean(axis=1, keepdims=True), compute_uv=False)
    planar = s[:, 2] <= PLANAR_TOL * s[:, 0]
    R = np.tile(np.eye(3), (B, 1, 1))
    t = np.zeros((B, 3))
    ok = np.zeros(B, dtype=bool)
    for sel, solver in ((distinct & ~planar, epnp_batch), (distinct & planar, planar_batch)):
        idx = np.nonzero(sel)[0]
        if len(idx):
            R[idx], t[idx], ok[idx] = solver(uv[idx], pts3d[idx], K)
    return R, t, ok


def _single(solver, uv, pts3d, K: Intrinsics, what: str) -> Pose:
    R, t, ok = solver(np.asarray(uv, dtype=np.float64)[None], np.asarray(pts3d, dtype=np.float64)[None], K)
    if not ok[0]:
        raise PnPError(f"{what}: degenerate sample")
    return Pose(R[0], t[0])


def epnp(uv: np.ndarray, pts3d: np.ndarray, K: Intrinsics) -> Pose:
    """EPnP; needs >= 4 non-coplanar points."""
    return _single(epnp_batch, uv, pts3d, K, "EPnP")


def planar_pnp(uv: np.ndarray, pts3d: np.ndarray, K: Intrinsics) -> Pose:
    return _single(planar_batch, uv, pts3d, K, "planar PnP")


def minimal_pnp(uv: np.ndarray, pts3d: np.ndarray, K: Intrinsics) -> Pose:
    return _single(minimal_pnp_batch, uv, pts3d, K, "minimal PnP")


# -- refinement -------------------------------------------------------------

def refine_pose_lm(uv: np.ndarray, pts3d: np.ndarray, K: Intrinsics, pose: Pose,
                   max_iters: int = 100) -> Pose:
    """Levenberg-Marquardt on total squared reprojection error.

    Rotation is updated by a left-multiplied axis-angle increment, so the
    parameters are (axis-angle, translation).
    """
    uv = np.asarray(uv, dtype=np.float64)
    P = np.asarray(pts3d, dtype=np.float64)
    R, t = pose.R.copy(), pose.t.copy()

    def cost_of(R, t):
        X = P @ R.T + t
        if np.any(X[:, 2] <= 1e-9):
            return np.inf, None, None
        u = K.fx * X[:, 0] / X[:, 2] + K.cx
        v = K.fy * X[:, 1] / X[:, 2] + K.cy
        r = np.stack([u - uv[:, 0], v - uv[:, 1]], axis=1).ravel()
        return float(r @ r), r, X

    cost, r, X = cost_of(R, t)
    if not np.isfinite(cost):
        return pose
    lam = 1e-3
    for _ in range(max_iters):
        Z = X[:, 2]
        du = np.stack([K.fx / Z, np.zeros_like(Z), -K.fx * X[:, 0] / Z ** 2], axis=1)
        dv = np.stack([np.zeros_like(Z), K.fy / Z, -K.fy * X[:, 1] / Z ** 2], axis=1)
        RP = P @ R.T
        J = np.zeros((2 * len(P), 6))
        for i, d in ((0, du), (1, dv)):
            # d(exp(w) R p)/dw = -[R p]x, and a^T (-[q]x) = (q x a)^T
            J[i::2, :3] = np.cross(RP, d)
            J[i::2, 3:] = d
        H = J.T @ J
        g = J.T @ r
        improved = False
        while lam < 1e12:
            step = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), -g)
            Rn = rodrigues(step[:3]) @ R
            tn = t + step[3:]
            cn, rn, Xn = cost_of(Rn, tn)
            if cn < cost:
                improved = True
                lam = max(lam / 10, 1e-12)
                done = cost - cn <= 1e-15 * max(cost, 1.0) or np.linalg.norm(step) < 1e-12
                R, t, cost, r, X = Rn, tn, cn, rn, Xn
                break
            lam *= 10
        if not improved or done:
            break
    return Pose(orthonormalize(R), t)


# -- RANSAC -----------------------------------------------------------------

def ransac_pnp(uv: np.ndarray, pts3d: np.ndarray, K: Intrinsics, cfg: RansacConfig = None) -> PnPResult:
    """Robust pose from 2D-3D correspondences.

    Raises :class:`PnPError` with fewer than six correspondences or when no
    hypothesis gathers ``cfg.min_inliers`` inliers.
    """
    cfg = cfg or RansacConfig()
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    pts3d = np.asarray(pts3d, dtype=np.float64).reshape(-1, 3)
    n = len(uv)
    if len(pts3d) != n:
        raise PnPError(f"{n} image points but {len(pts3d)} model points")
    if n < 6:
        raise PnPError(f"need at least 6 correspondences, got {n}")
    rng = np.random.default_rng(cfg.seed)
    k = cfg.sample_size
    samples = np.stack([rng.choice(n, k, replace=False) for _ in range(cfg.iterations)])
    R, t, ok = minimal_pnp_batch(uv[samples], pts3d[samples], K)
    err = _batch_reproj(uv, pts3d, R, t, K)              # (iterations, n)
    inl = (err <= cfg.inlier_px) & ok[:, None]
    counts = inl.sum(axis=1)
    spread = np.where(inl, err, 0.0).sum(axis=1)
    # most inliers, then smallest summed inlier error, then earliest iteration
    order = np.lexsort((np.arange(len(counts)), spread, -counts))
    best = order[0]
    if not ok[best] or counts[best] < cfg.min_inliers:
        raise PnPError("no pose: no consensus set reached the minimum inlier count")
    best_pose, best_inl = Pose(R[best], t[best]), inl[best]
    pose, inl = best_pose, best_inl
    if cfg.refine:
        for _ in range(3):
            pose = refine_pose_lm(uv[inl], pts3d[inl], K, pose)
            new_inl = reprojection_errors(uv, pts3d, pose, K) <= cfg.inlier_px
            if new_inl.sum() < cfg.min_inliers or np.array_equal(new_inl, inl):
                break
            inl = new_inl
    err = reprojection_errors(uv, pts3d, pose, K)
    rms = float(np.sqrt(np.mean(err[inl] ** 2))) if inl.any() else float("inf")
    return PnPResult(pose, inl, rms)
