"""Training losses: focal loss for location and mask scores, the
smooth-L1-plus-edge-length loss for box-corner correspondences, and their
weighted total.

Each loss is a graph node whose backward pass is written out by hand; the
formulas are also exposed as plain numpy functions so tests can compare them
against independent implementations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import BOX_EDGES, TargetAssignment, flatten_head_output, unflatten_head_grad
from .tensor import Tensor, add, custom_op, scale, sum_of_squares

CLAMP = 1e-7
_EDGE_I = np.array([e[0] for e in BOX_EDGES])
_EDGE_J = np.array([e[1] for e in BOX_EDGES])


@dataclass
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("focal alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("focal gamma must be non-negative")


@dataclass
class CorrLossConfig:
    delta: float = 0.8
    edge_weight: float = 1.0

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("smooth-L1 delta must be positive")
        if self.edge_weight < 0:
            raise ValueError("edge weight must be non-negative")


@dataclass
class LossWeights:
    correspondence: float = 0.125
    location: float = 1.0
    mask: float = 0.1

    def __post_init__(self):
        if min(self.correspondence, self.location, self.mask) < 0:
            raise ValueError("loss weights must be non-negative")


# -- elementwise formulas ---------------------------------------------------

def focal_terms(p: np.ndarray, y: np.ndarray, cfg: FocalConfig) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise focal loss and its derivative with respect to ``p``."""
    a, g = cfg.alpha, cfg.gamma
    inside = (p > CLAMP) & (p < 1 - CLAMP)
    pc = np.clip(p, CLAMP, 1 - CLAMP)
    q = 1 - pc
    log_p, log_q = np.log(pc), np.log(q)
    pos = y > 0.5
    loss = np.where(pos, -a * q ** g * log_p, -(1 - a) * pc ** g * log_q)
    # gamma * x**(gamma - 1) vanishes with gamma; avoid 0**-1
    gq = g * q ** (g - 1) if g else 0.0
    gp = g * pc ** (g - 1) if g else 0.0
    d_pos = -a * (-gq * log_p + q ** g / pc)
    d_neg = -(1 - a) * (gp * log_q - pc ** g / q)
    grad = np.where(pos, d_pos, d_neg) * inside
    return loss, grad


def focal_loss(pred, target, cfg: FocalConfig = None) -> float:
    """Summed focal loss of sigmoid scores ``pred`` against {0, 1} ``target``."""
    loss, _ = focal_terms(np.asarray(pred, dtype=np.float64), np.asarray(target), cfg or FocalConfig())
    return float(loss.sum())


def smooth_l1(r: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Value and derivative; quadratic below ``delta``, linear above."""
    ar = np.abs(r)
    quad = ar < delta
    val = np.where(quad, 0.5 * r * r / delta, ar - 0.5 * delta)
    der = np.where(quad, r / delta, np.sign(r))
    return val, der


def correspondence_terms(pred16: np.ndarray, target16: np.ndarray, anchors: np.ndarray,
                         cfg: CorrLossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor loss and gradient w.r.t. ``pred16`` for (P, 16) inputs.

    point term: mean smooth-L1 over the 16 normalised residuals.
    edge term:  mean over the 12 box edges of smooth-L1 of the difference of
                predicted and target edge lengths, in pixels.
    """
    pred16 = np.asarray(pred16, dtype=np.float64)
    target16 = np.asarray(target16, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    val, der = smooth_l1(pred16 - target16, cfg.delta)
    loss = val.mean(axis=1)
    grad = der / 16.0
    if cfg.edge_weight:
        wh = np.stack([anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]], axis=1)  # (P, 2)
        cp = pred16.reshape(-1, 8, 2) * wh[:, None, :]
        ct = target16.reshape(-1, 8, 2) * wh[:, None, :]
        ep = cp[:, _EDGE_J] - cp[:, _EDGE_I]                  # (P, 12, 2)
        et = ct[:, _EDGE_J] - ct[:, _EDGE_I]
        lp = np.sqrt((ep ** 2).sum(-1))
        lt = np.sqrt((et ** 2).sum(-1))
        ev, ed = smooth_l1(lp - lt, cfg.delta)
        loss = loss + cfg.edge_weight * ev.mean(axis=1)
        unit = ep / np.maximum(lp, 1e-12)[..., None]
        d_edge = (cfg.edge_weight / len(BOX_EDGES)) * ed[..., None] * unit  # dL/d ep
        d_corner = np.zeros_like(cp)
        np.add.at(d_corner, (slice(None), _EDGE_J), d_edge)
        np.add.at(d_corner, (slice(None), _EDGE_I), -d_edge)
        grad = grad + (d_corner * wh[:, None, :]).reshape(-1, 16)
    return loss, grad


def correspondence_loss(pred16, target16, anchor, cfg: CorrLossConfig = None) -> float:
    """Loss for a single positive anchor."""
    loss, _ = correspondence_terms(np.atleast_2d(pred16), np.atleast_2d(target16),
                                   np.atleast_2d(anchor), cfg or CorrLossConfig())
    return float(loss[0])


# -- graph nodes ------------------------------------------------------------

def _scalar(value: float, like: Tensor) -> np.ndarray:
    return np.full((1, 1, 1, 1), value, dtype=like.data.dtype)


def location_loss(scores: list, assignments: list, num_classes: int, cfg: FocalConfig) -> Tensor:
    """Focal loss over all anchors of all levels, per image normalised by
    max(1, positives), averaged over the batch."""
    flats = [flatten_head_output(s.data, num_classes) for s in scores]
    p = np.concatenate(flats, axis=1).astype(np.float64)  # (N, total, K)
    n, total, k = p.shape
    y = np.zeros_like(p)
    norm = np.ones(n)
    for b, asg in enumerate(assignments):
        if len(asg.labels) != total:
            raise ValueError(f"assignment covers {len(asg.labels)} anchors, outputs have {total}")
        idx = np.nonzero(asg.labels > 0)[0]
        y[b, idx, asg.labels[idx] - 1] = 1.0
        norm[b] = max(1, asg.num_positive)
    loss, grad = focal_terms(p, y, cfg)
    value = float((loss.sum(axis=(1, 2)) / norm).mean())
    grad = grad / norm[:, None, None] / n
    sizes = [f.shape[1] for f in flats]

    def backward(g: np.ndarray) -> None:
        s = float(g.reshape(()))
        start = 0
        for t, size in zip(scores, sizes):
            if t.requires_grad:
                part = grad[:, start:start + size] * s
                t.accumulate(unflatten_head_grad(part, t.shape, num_classes).astype(t.data.dtype))
            start += size

    return custom_op(_scalar(value, scores[0]), scores, backward)


def mask_loss(mask_scores: Tensor, targets: np.ndarray, cfg: FocalConfig) -> Tensor:
    """Focal loss over mask cells, per image normalised by the number of cells."""
    p = mask_scores.data.astype(np.float64)
    if targets.shape != p.shape:
        raise ValueError(f"mask targets {targets.shape} do not match predictions {p.shape}")
    n, _, h, w = p.shape
    loss, grad = focal_terms(p, targets, cfg)
    value = float(loss.sum() / (h * w) / n)
    grad = grad / (h * w) / n

    def backward(g: np.ndarray) -> None:
        mask_scores.accumulate((grad * float(g.reshape(()))).astype(mask_scores.data.dtype))

    return custom_op(_scalar(value, mask_scores), (mask_scores,), backward)


def corr_loss(outputs: list, assignments: list, anchor_boxes: np.ndarray, cfg: CorrLossConfig) -> Tensor:
    """Correspondence loss over positive anchors only, averaged per image over
    its positives, then over the batch.  Images without positives add zero."""
    flats = [flatten_head_output(o.data, 16) for o in outputs]
    pred = np.concatenate(flats, axis=1).astype(np.float64)  # (N, total, 16)
    n = pred.shape[0]
    grad = np.zeros_like(pred)
    value = 0.0
    for b, asg in enumerate(assignments):
        idx = np.nonzero(asg.positive)[0]
        if len(idx) == 0:
            continue
        loss, g = correspondence_terms(pred[b, idx], asg.corr_targets[idx], anchor_boxes[idx], cfg)
        value += loss.mean() / n
        grad[b, idx] = g / len(idx) / n
    sizes = [f.shape[1] for f in flats]

    def backward(g: np.ndarray) -> None:
        s = float(g.reshape(()))
        start = 0
        for t, size in zip(outputs, sizes):
            if t.requires_grad:
                part = grad[:, start:start + size] * s
                t.accumulate(unflatten_head_grad(part, t.shape, 16).astype(t.data.dtype))
            start += size

    return custom_op(_scalar(value, outputs[0]), outputs, backward)


@dataclass
class LossBreakdown:
    correspondence: float
    location: float
    mask: float
    l2: float
    total: float

    def as_dict(self) -> dict:
        return {"L_corr": self.correspondence, "L_loc": self.location, "L_mask": self.mask,
                "l2": self.l2, "total": self.total}


def total_loss(output, assignments: list, mask_targets: np.ndarray, anchor_boxes: np.ndarray,
               num_classes: int, l2_weights: list, l2_lambda: float = 0.001,
               weights: LossWeights = None, focal: FocalConfig = None,
               corr_cfg: CorrLossConfig = None) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the three head losses plus the correspondence-tower l2 term.

    The breakdown reports the weighted contribution of each term; they sum to
    the total.
    """
    weights = weights or LossWeights()
    focal = focal or FocalConfig()
    corr_cfg = corr_cfg or CorrLossConfig()
    lc = corr_loss(output.correspondence, assignments, anchor_boxes, corr_cfg)
    ll = location_loss(output.location, assignments, num_classes, focal)
    lm = mask_loss(output.mask, mask_targets, focal)
    terms = [scale(lc, weights.correspondence), scale(ll, weights.location), scale(lm, weights.mask)]
    if l2_weights:
        terms.append(scale(sum_of_squares(l2_weights), l2_lambda))
    tot = terms[0]
    for t in terms[1:]:
        tot = add(tot, t)
    parts = [t.item() for t in terms] + ([0.0] if not l2_weights else [])
    return tot, LossBreakdown(parts[0], parts[1], parts[2], parts[3], tot.item())
