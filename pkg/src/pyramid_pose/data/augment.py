"""Photometric training-time augmentation.

Every operation works on float images in [0, 1] and leaves geometry
untouched, so boxes, masks and corners stay valid.  The operations are
applied in a random order, each with its own chance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional

import cv2
import numpy as np
from scipy.ndimage import median_filter


@dataclass
class AugEntry:
    chance: float
    low: float
    high: float
    per_channel: Optional[float] = None   # chance of drawing one parameter per channel

    def __post_init__(self):
        if not 0 <= self.chance <= 1:
            raise ValueError(f"chance {self.chance} outside [0, 1]")
        if self.per_channel is not None and not 0 <= self.per_channel <= 1:
            raise ValueError(f"per-channel chance {self.per_channel} outside [0, 1]")
        if self.low > self.high:
            raise ValueError(f"empty range [{self.low}, {self.high}]")


@dataclass
class AugmentationConfig:
    gaussian_blur: AugEntry = field(default_factory=lambda: AugEntry(0.2, 0.0, 2.0))
    avg_median_motion_blur: AugEntry = field(default_factory=lambda: AugEntry(0.2, 3.0, 7.0))
    bilateral_blur: AugEntry = field(default_factory=lambda: AugEntry(0.2, 1.0, 7.0))
    hue_saturation: AugEntry = field(default_factory=lambda: AugEntry(0.5, -15.0, 15.0))
    grayscale: AugEntry = field(default_factory=lambda: AugEntry(0.5, 0.0, 0.2))
    add: AugEntry = field(default_factory=lambda: AugEntry(0.5, -0.04, 0.04, 0.5))
    multiply: AugEntry = field(default_factory=lambda: AugEntry(0.5, 0.75, 1.25, 0.5))
    gamma_contrast: AugEntry = field(default_factory=lambda: AugEntry(0.5, 0.75, 1.25, 0.5))
    sigmoid_contrast: AugEntry = field(default_factory=lambda: AugEntry(0.5, 0.0, 10.0, 0.5))
    log_contrast: AugEntry = field(default_factory=lambda: AugEntry(0.5, 0.75, 1.0, 0.5))
    linear_contrast: AugEntry = field(default_factory=lambda: AugEntry(0.5, 0.7, 1.3, 0.5))

    def names(self) -> list[str]:
        return [f.name for f in fields(self)]

    def with_chance(self, chance: float) -> "AugmentationConfig":
        """Copy with every application chance set to ``chance``."""
        return AugmentationConfig(**{n: replace(getattr(self, n), chance=chance) for n in self.names()})

    def to_dict(self) -> dict:
        return {n: dict(getattr(self, n).__dict__) for n in self.names()}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown augmentation entries: {sorted(unknown)}")
        return cls(**{k: AugEntry(**v) for k, v in d.items()})


# -- individual operations -------------------------------------------------

def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 1e-3:
        return img
    return cv2.GaussianBlur(img, (0, 0), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT_101)


def average_blur(img: np.ndarray, k: int) -> np.ndarray:
    return cv2.blur(img, (k, k), borderType=cv2.BORDER_REFLECT_101)


def median_blur(img: np.ndarray, k: int) -> np.ndarray:
    k = k if k % 2 else k + 1
    return median_filter(img, size=(k, k, 1), mode="mirror")


def motion_kernel(k: int, angle: float) -> np.ndarray:
    """Normalised k x k line kernel through the centre at ``angle`` degrees."""
    kern = np.zeros((k, k), dtype=np.float32)
    c = (k - 1) / 2
    dx, dy = np.cos(np.deg2rad(angle)), np.sin(np.deg2rad(angle))
    for s in np.linspace(-c, c, 4 * k):
        kern[int(round(c + s * dy)), int(round(c + s * dx))] = 1.0
    return kern / kern.sum()


def motion_blur(img: np.ndarray, k: int, angle: float) -> np.ndarray:
    return cv2.filter2D(img, -1, motion_kernel(k, angle), borderType=cv2.BORDER_REFLECT_101)


def bilateral_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Spatial sigma ``sigma`` px; range sigma ``sigma`` on the 8-bit scale."""
    return cv2.bilateralFilter(img, d=-1, sigmaColor=sigma / 255.0, sigmaSpace=sigma)


def hue_saturation(img: np.ndarray, value: float) -> np.ndarray:
    """Shift hue and saturation by ``value`` units of a 0..255 scale."""
    hsv = cv2.cvtColor(img, cv2.COLOR_RGB2HSV)          # H in [0, 360), S, V in [0, 1]
    hsv[..., 0] = np.mod(hsv[..., 0] + value * 360.0 / 255.0, 360.0)
    hsv[..., 1] = np.clip(hsv[..., 1] + value / 255.0, 0.0, 1.0)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)


def grayscale(img: np.ndarray, alpha: float) -> np.ndarray:
    gray = cv2.cvtColor(img, cv2.COLOR_RGB2GRAY)[..., None]
    return (1 - alpha) * img + alpha * gray


def sigmoid_contrast(x: np.ndarray, gain: np.ndarray, cutoff: float = 0.5) -> np.ndarray:
    """Logistic curve rescaled so that 0 -> 0 and 1 -> 1; gain 0 is the identity."""
    gain = np.asarray(gain, dtype=np.float32)
    g = np.maximum(gain, 1e-4)
    s = 1.0 / (1.0 + np.exp(g * (cutoff - x)))
    s0 = 1.0 / (1.0 + np.exp(g * cutoff))
    s1 = 1.0 / (1.0 + np.exp(g * (cutoff - 1.0)))
    return np.where(gain < 1e-4, x, (s - s0) / (s1 - s0))


_POINTWISE = {
    "add": lambda x, v: x + v,
    "multiply": lambda x, v: x * v,
    "gamma_contrast": lambda x, v: np.power(np.clip(x, 0.0, 1.0), v),
    "sigmoid_contrast": sigmoid_contrast,
    "log_contrast": lambda x, v: v * np.log2(1.0 + np.clip(x, 0.0, 1.0)),
    "linear_contrast": lambda x, v: 0.5 + v * (x - 0.5),
}


def _channel_values(entry: AugEntry, rng: np.random.Generator) -> np.ndarray:
    if entry.per_channel is not None and rng.random() < entry.per_channel:
        return rng.uniform(entry.low, entry.high, 3).astype(np.float32)
    return np.full(3, rng.uniform(entry.low, entry.high), dtype=np.float32)


def _apply(name: str, entry: AugEntry, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if name in _POINTWISE:
        return _POINTWISE[name](img, _channel_values(entry, rng))
    v = rng.uniform(entry.low, entry.high)
    if name == "gaussian_blur":
        return gaussian_blur(img, v)
    if name == "avg_median_motion_blur":
        k = int(np.clip(round(v), 1, None))
        kind = rng.integers(3)
        if kind == 0:
            return average_blur(img, k)
        if kind == 1:
            return median_blur(img, k)
        return motion_blur(img, k, rng.uniform(0.0, 360.0))
    if name == "bilateral_blur":
        return bilateral_blur(img, v)
    if name == "hue_saturation":
        return hue_saturation(img, v)
    if name == "grayscale":
        return grayscale(img, v)
    raise KeyError(name)


def augment(rgb: np.ndarray, cfg: AugmentationConfig = None, rng: np.random.Generator = None) -> np.ndarray:
    """Randomly ordered photometric augmentation of an (H, W, 3) image in [0, 1]."""
    cfg = cfg or AugmentationConfig()
    rng = rng or np.random.default_rng()
    img = np.clip(np.asarray(rgb, dtype=np.float32), 0.0, 1.0)
    names = cfg.names()
    for i in rng.permutation(len(names)):
        entry = getattr(cfg, names[i])
        if entry.chance > 0 and rng.random() < entry.chance:
            img = np.clip(_apply(names[i], entry, img, rng), 0.0, 1.0).astype(np.float32)
    return img
