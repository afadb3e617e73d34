"""Parameter containers: a tiny module system and the convolution layer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor, conv2d, relu

# focal-loss prior: initial foreground probability of classification outputs
PRIOR_PROBABILITY = 0.01


class Module:
    """Base class; parameters are discovered by walking attributes in definition order."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, p in own.items():
            if p.shape != state[k].shape:
                raise ValueError(f"{k}: expected shape {p.shape}, checkpoint has {state[k].shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0


class Conv2d(Module):
    """kxk convolution with 'same' padding for odd k.

    ``init`` selects the weight initialisation: ``"he"`` (default), ``"head"``
    (small normal, std 0.01, for prediction layers) or ``"zeros"``.
    """

    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
                 stride: int = 1, init: str = "he", bias_value: float = 0.0,
                 dtype=np.float32):
        if k % 2 == 0:
            raise ValueError("only odd kernel sizes are supported")
        if init == "he":
            std = math.sqrt(2.0 / (in_ch * k * k))
        elif init == "head":
            std = 0.01
        elif init == "zeros":
            std = 0.0
        else:
            raise ValueError(f"unknown init {init!r}")
        w = rng.standard_normal((out_ch, in_ch, k, k)) * std
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.full(out_ch, bias_value, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = k // 2
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.k = k

    @property
    def params(self) -> ConvParams:
        return ConvParams(self.weight, self.bias, self.stride, self.padding)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvReLU(Conv2d):
    def __call__(self, x: Tensor) -> Tensor:
        return relu(super().__call__(x))


def prior_bias(pi: float = PRIOR_PROBABILITY) -> float:
    """Bias giving sigmoid(bias) == pi."""
    return -math.log((1 - pi) / pi)


def child_rng(seed: Optional[int], *tags: int) -> np.random.Generator:
    """Independent generator for a named sub-component."""
    return np.random.default_rng(np.random.SeedSequence([0 if seed is None else seed, *tags]))
