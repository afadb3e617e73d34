"""Run configuration: one nested dataclass tree, stored as YAML."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data.augment import AugmentationConfig
from .data.synth import SynthRanges
from .heads import HeadConfig, ModelConfig
from .icp import IcpConfig
from .losses import CorrLossConfig, FocalConfig, LossWeights
from .metrics import EvalConfig
from .pnp import RansacConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    """Either a generated set (``bop_root`` empty) or BOP scenes on disk."""
    num_scenes: int = 32
    generator_seed: int = 0
    ranges: SynthRanges = field(default_factory=SynthRanges)
    bop_root: str = ""
    scene_ids: tuple = (0,)
    symmetric_classes: tuple = ()


@dataclass
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    focal: FocalConfig = field(default_factory=FocalConfig)
    correspondence: CorrLossConfig = field(default_factory=CorrLossConfig)
    positive_iou: float = 0.5


@dataclass
class OptimConfig:
    lr: float = 1e-5
    batch_size: int = 8
    epochs: int = 200
    max_steps: Optional[int] = None
    plateau_factor: float = 0.1
    plateau_patience: int = 2
    freeze_backbone: bool = False
    checkpoint_every: int = 1          # epochs

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("lr must be positive and batch_size, epochs at least 1")


@dataclass
class InferConfig:
    score_threshold: float = 0.5
    ransac: RansacConfig = field(default_factory=RansacConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    use_icp: bool = False
    icp_model_points: int = 1000
    # model points whose pixel shows depth this many mm in front of them are occluded
    icp_occlusion_mm: float = 10.0


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    # the default data are the two generated cuboids, so the heads default to two classes
    model: ModelConfig = field(default_factory=lambda: ModelConfig(heads=HeadConfig(num_classes=2)))
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    augment: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    checkpoint: str = "run/model.ckpt"
    out_dir: str = "run"

    # -- serialisation --------------------------------------------------
    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_plain(cls(), d or {}, "")

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"{path}: {e}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, frozenset):
        return sorted(_to_plain(x) for x in obj)
    if isinstance(obj, (list, tuple)):
        return [_to_plain(x) for x in obj]
    return obj


def _from_plain(default, data: dict, where: str):
    """Rebuild a dataclass like ``default`` with the entries of ``data``
    overriding its field values."""
    cls = type(default)
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {f: getattr(default, f) for f in known}
    for name, value in data.items():
        current = getattr(default, name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _from_plain(current, value, path)
        elif isinstance(current, frozenset):
            kwargs[name] = frozenset(value)
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None
