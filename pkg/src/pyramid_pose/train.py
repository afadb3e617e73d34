"""Training loop: target preparation, Adam updates, plateau schedule,
checkpointing and JSON-lines loss logs."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .anchors import Anchors, TargetAssignment, assign_targets, generate_anchors
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data.augment import augment
from .data.bop import load_bop_scene, load_models
from .data.mesh import MeshModel, default_objects
from .data.synth import SceneSample, synth_generate
from .heads import PoseNetwork
from .losses import total_loss
from .nn import child_rng
from .optim import Adam, PlateauSchedule
from .tensor import Tensor

log = logging.getLogger(__name__)

MASK_STRIDE = 8


def image_tensor(rgbs: Sequence[np.ndarray]) -> Tensor:
    """(H, W, 3) images in [0, 1] -> centred NCHW float32 batch."""
    x = np.stack([np.asarray(im, dtype=np.float32) for im in rgbs]).transpose(0, 3, 1, 2)
    return Tensor(np.ascontiguousarray((x - 0.5) * 2.0))


def mask_targets(sample: SceneSample, num_classes: int) -> np.ndarray:
    """(K, H/8, W/8) cell targets: a cell is foreground for class k when at
    least half of its pixels belong to visible objects of that class."""
    h, w = sample.shape
    out = np.zeros((num_classes, h // MASK_STRIDE, w // MASK_STRIDE), dtype=np.float32)
    for o in sample.objects:
        cover = o.mask.reshape(h // MASK_STRIDE, MASK_STRIDE, w // MASK_STRIDE, MASK_STRIDE).mean(axis=(1, 3))
        out[o.class_id - 1] = np.maximum(out[o.class_id - 1], cover >= 0.5)
    return out


def sample_assignment(sample: SceneSample, anchors: Anchors, threshold: float = 0.5) -> TargetAssignment:
    return assign_targets(anchors, [(o.class_id, o.box, o.corners) for o in sample.objects], threshold)


@dataclass
class TrainTargets:
    anchors: Anchors
    assignments: list
    masks: np.ndarray            # (S, K, H/8, W/8)


def prepare_targets(samples: Sequence[SceneSample], cfg: RunConfig) -> TrainTargets:
    hw = samples[0].shape
    for s in samples:
        if s.shape != hw:
            raise ValueError(f"image {s.image_id} is {s.shape}, expected {hw}")
    k = cfg.model.heads.num_classes
    for s in samples:
        for o in s.objects:
            if not 1 <= o.class_id <= k:
                raise ValueError(f"image {s.image_id}: class id {o.class_id} outside 1..{k}")
    anchors = generate_anchors(hw, cfg.model.anchors)
    asg = [sample_assignment(s, anchors, cfg.loss.positive_iou) for s in samples]
    masks = np.stack([mask_targets(s, k) for s in samples])
    return TrainTargets(anchors, asg, masks)


def load_dataset(cfg: RunConfig) -> tuple[list[SceneSample], dict[int, MeshModel]]:
    """Generated scenes, or the configured BOP scenes when ``bop_root`` is set."""
    if cfg.data.bop_root:
        meshes = load_models(cfg.data.bop_root)
        for cid in cfg.data.symmetric_classes:
            meshes[int(cid)].symmetric = True
        samples = []
        for sid in cfg.data.scene_ids:
            samples.extend(load_bop_scene(cfg.data.bop_root, int(sid), meshes))
        return samples, meshes
    objs = default_objects()
    meshes = {m.class_id: m for m in objs}
    return synth_generate(objs, cfg.data.num_scenes, cfg.data.ranges, cfg.data.generator_seed), meshes


def build_network(cfg: RunConfig) -> PoseNetwork:
    return PoseNetwork(cfg.model, seed=cfg.seed)


def save_network(path, net: PoseNetwork, cfg: RunConfig, extra: Optional[dict] = None) -> None:
    meta = {"config": cfg.to_dict()}
    meta.update(extra or {})
    save_checkpoint(path, net.state_dict(), meta)


def load_network(path, cfg: Optional[RunConfig] = None) -> tuple[PoseNetwork, RunConfig]:
    """Restore a network.  When ``cfg`` is given its model section must agree
    with the one stored in the checkpoint."""
    params, meta = load_checkpoint(path)
    if "config" not in meta:
        raise CheckpointError(f"{path}: no configuration stored in the checkpoint")
    stored = RunConfig.from_dict(meta["config"])
    if cfg is not None and cfg.model != stored.model:
        raise CheckpointError(f"{path}: model configuration differs from the requested one")
    cfg = cfg or stored
    net = PoseNetwork(stored.model, seed=stored.seed)
    try:
        net.load_state_dict(params)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: {e}") from None
    return net, cfg


@dataclass
class TrainResult:
    network: PoseNetwork
    history: list = field(default_factory=list)   # one dict per step
    epochs: list = field(default_factory=list)    # per-epoch mean loss breakdown
    steps: int = 0
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.history[-1]["total"] if self.history else float("nan")


def train(cfg: RunConfig, samples: Optional[Sequence[SceneSample]] = None,
          log_path=None, checkpoint_path=None) -> TrainResult:
    """Train from scratch.  Deterministic for a fixed config and seed."""
    if samples is None:
        samples, _ = load_dataset(cfg)
    samples = list(samples)
    if not samples:
        raise ValueError("training set is empty")
    checkpoint_path = Path(checkpoint_path or cfg.checkpoint)
    targets = prepare_targets(samples, cfg)
    net = build_network(cfg)
    params = net.parameters()
    if cfg.optim.freeze_backbone:
        frozen = {id(p) for p in net.backbone.parameters()}
        params = [p for p in params if id(p) not in frozen]
    opt = Adam(params, lr=cfg.optim.lr)
    schedule = PlateauSchedule(cfg.optim.plateau_factor, cfg.optim.plateau_patience)
    l2 = net.l2_weights()
    order_rng = child_rng(cfg.seed, 10)
    aug_rng = child_rng(cfg.seed, 11)
    logf = open(log_path, "w") if log_path else None
    result = TrainResult(net)
    start = time.perf_counter()
    bs = min(cfg.optim.batch_size, len(samples))
    try:
        for epoch in range(cfg.optim.epochs):
            order = order_rng.permutation(len(samples))
            epoch_parts = []
            for b in range(0, len(order) - bs + 1, bs):
                idx = order[b:b + bs]
                rgbs = [augment(samples[i].rgb, cfg.augmentation, aug_rng) if cfg.augment else samples[i].rgb
                        for i in idx]
                net.zero_grad()
                out = net(image_tensor(rgbs))
                loss, parts = total_loss(out, [targets.assignments[i] for i in idx], targets.masks[idx],
                                         targets.anchors.boxes, cfg.model.heads.num_classes, l2,
                                         cfg.model.heads.l2_lambda, cfg.loss.weights, cfg.loss.focal,
                                         cfg.loss.correspondence)
                if not np.isfinite(parts.total):
                    raise FloatingPointError(f"non-finite loss at step {result.steps}")
                loss.backward()
                for p in params:
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                opt.step()
                result.steps += 1
                rec = {"kind": "step", "step": result.steps, "epoch": epoch, "lr": opt.lr, **parts.as_dict()}
                result.history.append(rec)
                epoch_parts.append(parts.as_dict())
                if logf:
                    logf.write(json.dumps(rec) + "\n")
                    logf.flush()
                if cfg.optim.max_steps and result.steps >= cfg.optim.max_steps:
                    break
            summary = {key: float(np.mean([p[key] for p in epoch_parts])) for key in epoch_parts[0]}
            mean = summary["total"]
            new_lr = schedule.update(mean, opt.lr)
            erec = {"kind": "epoch", "epoch": epoch, **summary, "lr": opt.lr, "steps": result.steps}
            result.epochs.append(erec)
            if logf:
                logf.write(json.dumps(erec) + "\n")
                logf.flush()
            log.info("epoch %d  mean loss %.5f  lr %.2e", epoch, mean, opt.lr)
            opt.lr = new_lr
            done = bool(cfg.optim.max_steps and result.steps >= cfg.optim.max_steps)
            if done or epoch == cfg.optim.epochs - 1 or (epoch + 1) % cfg.optim.checkpoint_every == 0:
                save_network(checkpoint_path, net, cfg, {"epoch": epoch, "step": result.steps})
            if done:
                break
    finally:
        if logf:
            logf.close()
    result.seconds = time.perf_counter() - start
    return result
