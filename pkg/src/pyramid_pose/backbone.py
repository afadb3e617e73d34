"""Toy convolutional backbone and the three multi-scale aggregation modes.

The backbone emits C3/C4/C5 at strides 8/16/32.  The aggregator turns them
into P3/P4/P5 of a common width using one of three graphs:

``pfpn``
    Pose feature pyramid.  Every fusion node adds exactly two stride-aligned
    inputs and applies 3x3 conv + ReLU.  P4 sees all backbone levels, C5 only
    passes a 1x1 lateral, and P3/P4 receive skip connections from their
    laterals.
``fpn``
    Classic top-down pyramid: 1x1 laterals, upsample-add, 3x3 smoothing.
``none``
    Independent 1x1 projections, no cross-scale flow.

Each graph is a declarative list of :class:`GraphNode` so the topology can be
audited and summarised without running it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .nn import Conv2d, ConvReLU, Module
from .tensor import ShapeError, Tensor, add, down2, relu, up2

STRIDES = {"P3": 8, "P4": 16, "P5": 32}
MODES = ("pfpn", "fpn", "none")


@dataclass
class BackboneConfig:
    widths: tuple = (32, 64, 128)
    convs_per_stage: int = 2
    stem_widths: tuple = (8, 16, 16)


@dataclass
class PFPNConfig:
    width: int = 256
    mode: str = "pfpn"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"aggregation mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class FeaturePyramid:
    P3: Tensor
    P4: Tensor
    P5: Tensor

    def levels(self) -> list[Tensor]:
        return [self.P3, self.P4, self.P5]


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, in_ch: int = 3):
        self.cfg = cfg
        self.stem = []
        c = in_ch
        for w in cfg.stem_widths:
            self.stem.append(ConvReLU(c, w, 3, rng))
            c = w
        self.stages = []
        for w in cfg.widths:
            stage = []
            for _ in range(cfg.convs_per_stage):
                stage.append(ConvReLU(c, w, 3, rng))
                c = w
            self.stages.append(stage)

    def __call__(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        if image.data.ndim != 4:
            raise ShapeError(f"backbone expects an NCHW image, got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            bad = "height" if h % 32 else "width"
            raise ShapeError(f"backbone: image {bad} must be divisible by 32, got {h}x{w}")
        x = image
        # stem runs at strides 1, 2, 4; each stage then halves once more
        for i, conv in enumerate(self.stem):
            x = conv(x)
            x = down2(x)
        outs = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = down2(x)
            for conv in stage:
                x = conv(x)
            outs.append(x)
        return outs[0], outs[1], outs[2]


@dataclass(frozen=True)
class GraphNode:
    """One vertex of an aggregation graph.

    kind: ``lateral`` (1x1 conv), ``fuse`` (add + 3x3 conv + ReLU),
    ``add`` (plain add), ``smooth`` (3x3 conv, linear), ``up2``/``down2``.
    """

    name: str
    kind: str
    inputs: tuple

    @property
    def is_add(self) -> bool:
        return self.kind in ("fuse", "add")


def _n(name: str, kind: str, *inputs: str) -> GraphNode:
    return GraphNode(name, kind, tuple(inputs))


GRAPHS: dict[str, tuple[GraphNode, ...]] = {
    "pfpn": (
        _n("L3", "lateral", "C3"),
        _n("L4", "lateral", "C4"),
        _n("L5", "lateral", "C5"),
        _n("U5", "up2", "L5"),
        _n("T4", "fuse", "L4", "U5"),
        _n("U4", "up2", "T4"),
        _n("T3", "fuse", "L3", "U4"),
        _n("P3", "fuse", "T3", "L3"),
        _n("D3", "down2", "P3"),
        _n("B4", "fuse", "T4", "D3"),
        _n("P4", "fuse", "B4", "L4"),
        _n("D4", "down2", "P4"),
        _n("P5", "fuse", "L5", "D4"),
    ),
    "fpn": (
        _n("L3", "lateral", "C3"),
        _n("L4", "lateral", "C4"),
        _n("L5", "lateral", "C5"),
        _n("U5", "up2", "L5"),
        _n("M4", "add", "L4", "U5"),
        _n("U4", "up2", "M4"),
        _n("M3", "add", "L3", "U4"),
        _n("P3", "smooth", "M3"),
        _n("P4", "smooth", "M4"),
        _n("P5", "smooth", "L5"),
    ),
    "none": (
        _n("P3", "lateral", "C3"),
        _n("P4", "lateral", "C4"),
        _n("P5", "lateral", "C5"),
    ),
}


def ancestors(graph: Iterable[GraphNode], name: str) -> set[str]:
    """All names (nodes and graph inputs) that ``name`` transitively depends on."""
    table = {n.name: n for n in graph}
    seen: set[str] = set()
    stack = list(table[name].inputs)
    while stack:
        cur = stack.pop()
        if cur in seen:
            continue
        seen.add(cur)
        if cur in table:
            stack.extend(table[cur].inputs)
    return seen


class Aggregator(Module):
    """Runs one of the graphs in :data:`GRAPHS` with its own parameters."""

    def __init__(self, in_widths: tuple, cfg: PFPNConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.graph = GRAPHS[cfg.mode]
        widths = {"C3": in_widths[0], "C4": in_widths[1], "C5": in_widths[2]}
        W = cfg.width
        self.convs = []
        self._conv_of: dict[str, int] = {}
        for node in self.graph:
            if node.kind == "lateral":
                conv = Conv2d(widths[node.inputs[0]], W, 1, rng)
            elif node.kind == "fuse":
                conv = Conv2d(W, W, 3, rng)
            elif node.kind == "smooth":
                conv = Conv2d(W, W, 3, rng)
            else:
                conv = None
            if conv is not None:
                self._conv_of[node.name] = len(self.convs)
                self.convs.append(conv)

    def named_parameters(self, prefix: str = ""):
        # name parameters after graph nodes so checkpoints read naturally
        for node in self.graph:
            idx = self._conv_of.get(node.name)
            if idx is not None:
                yield from self.convs[idx].named_parameters(f"{prefix}{node.name}.")

    def __call__(self, c3: Tensor, c4: Tensor, c5: Tensor) -> FeaturePyramid:
        for a, b, label in ((c3, c4, "C3/C4"), (c4, c5, "C4/C5")):
            ha, wa = a.shape[2:]
            hb, wb = b.shape[2:]
            if (ha, wa) != (2 * hb, 2 * wb):
                raise ShapeError(f"aggregator: {label} extents {ha}x{wa} vs {hb}x{wb} are not stride-aligned")
        vals: dict[str, Tensor] = {"C3": c3, "C4": c4, "C5": c5}
        for node in self.graph:
            ins = [vals[i] for i in node.inputs]
            if node.kind == "up2":
                out = up2(ins[0])
            elif node.kind == "down2":
                out = down2(ins[0])
            elif node.kind == "add":
                out = add(ins[0], ins[1])
            elif node.kind == "fuse":
                out = relu(self.convs[self._conv_of[node.name]](add(ins[0], ins[1])))
            else:
                out = self.convs[self._conv_of[node.name]](ins[0])
            vals[node.name] = out
        return FeaturePyramid(vals["P3"], vals["P4"], vals["P5"])

    def summary_rows(self) -> list[tuple[str, str, tuple, int]]:
        rows = []
        for node in self.graph:
            idx = self._conv_of.get(node.name)
            count = self.convs[idx].num_parameters() if idx is not None else 0
            rows.append((node.name, node.kind, node.inputs, count))
        return rows


def model_summary(aggregator: Aggregator, backbone: Optional[Backbone] = None) -> str:
    """Plain-text table: one line per graph node with inputs and parameter count."""
    lines = [f"aggregation mode: {aggregator.cfg.mode}  width: {aggregator.cfg.width}"]
    if backbone is not None:
        lines.append(f"backbone parameters: {backbone.num_parameters()}")
    lines.append(f"{'node':<6} {'kind':<8} {'inputs':<14} params")
    for name, kind, inputs, count in aggregator.summary_rows():
        lines.append(f"{name:<6} {kind:<8} {','.join(inputs):<14} {count}")
    lines.append(f"aggregator parameters: {aggregator.num_parameters()}")
    return "\n".join(lines)
