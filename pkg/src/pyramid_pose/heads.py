"""Task heads and the assembled single-shot pose network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchors import AnchorSpec
from .backbone import Aggregator, Backbone, BackboneConfig, FeaturePyramid, PFPNConfig
from .nn import Conv2d, ConvReLU, Module, child_rng, prior_bias
from .tensor import ShapeError, Tensor, sigmoid


@dataclass
class HeadConfig:
    location_width: int = 256
    mask_width: int = 256
    correspondence_width: int = 512
    num_classes: int = 1
    anchors_per_location: int = 9
    l2_lambda: float = 0.001
    depth: int = 4


class Head(Module):
    """``depth`` 3x3 conv+ReLU layers followed by a linear 3x3 prediction conv.

    The same parameters are applied to every pyramid level it is given.
    """

    def __init__(self, in_width: int, width: int, out_ch: int, rng: np.random.Generator,
                 depth: int = 4, bias_value: float = 0.0):
        self.in_width = in_width
        self.tower = []
        c = in_width
        for _ in range(depth):
            self.tower.append(ConvReLU(c, width, 3, rng))
            c = width
        self.predict = Conv2d(c, out_ch, 3, rng, init="head", bias_value=bias_value)

    def tower_weights(self) -> list[Tensor]:
        return [conv.weight for conv in self.tower]

    def forward_level(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_width:
            raise ShapeError(f"head expects {self.in_width} input channels, got {x.shape[1]}")
        for conv in self.tower:
            x = conv(x)
        return self.predict(x)

    def __call__(self, levels):
        return [self.forward_level(x) for x in levels]


def location_head(pyramid: FeaturePyramid, head: Head) -> list[Tensor]:
    """Per-level sigmoid scores, A*K channels."""
    return [sigmoid(o) for o in head(pyramid.levels())]


def correspondence_head(pyramid: FeaturePyramid, head: Head) -> list[Tensor]:
    """Per-level linear outputs, A*16 channels."""
    return head(pyramid.levels())


def mask_head(pyramid: FeaturePyramid, head: Head) -> Tensor:
    """K sigmoid mask scores at stride 8; only P3 is consumed."""
    return sigmoid(head.forward_level(pyramid.P3))


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pyramid: PFPNConfig = field(default_factory=PFPNConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    anchors: AnchorSpec = field(default_factory=AnchorSpec)


@dataclass
class NetworkOutput:
    location: list      # per level (N, A*K, H, W) sigmoid scores
    correspondence: list  # per level (N, A*16, H, W)
    mask: Tensor        # (N, K, H/8, W/8) sigmoid scores
    pyramid: FeaturePyramid


class PoseNetwork(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        hc = cfg.heads
        a = cfg.anchors.per_location
        if hc.anchors_per_location != a:
            raise ValueError(f"head anchors_per_location={hc.anchors_per_location} but anchor spec gives {a}")
        W = cfg.pyramid.width
        self.backbone = Backbone(cfg.backbone, child_rng(seed, 1))
        self.pyramid = Aggregator(tuple(cfg.backbone.widths), cfg.pyramid, child_rng(seed, 2))
        self.location = Head(W, hc.location_width, a * hc.num_classes, child_rng(seed, 3),
                             depth=hc.depth, bias_value=prior_bias())
        self.correspondence = Head(W, hc.correspondence_width, a * 16, child_rng(seed, 4), depth=hc.depth)
        self.mask = Head(W, hc.mask_width, hc.num_classes, child_rng(seed, 5),
                         depth=hc.depth, bias_value=prior_bias())

    def __call__(self, images: Tensor) -> NetworkOutput:
        c3, c4, c5 = self.backbone(images)
        pyr = self.pyramid(c3, c4, c5)
        return NetworkOutput(
            location=location_head(pyr, self.location),
            correspondence=correspondence_head(pyr, self.correspondence),
            mask=mask_head(pyr, self.mask),
            pyramid=pyr,
        )

    def l2_weights(self) -> list[Tensor]:
        return self.correspondence.tower_weights()
