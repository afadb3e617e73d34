"""Adam and the reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        st = cls(**kw)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One in-place Adam update from each parameter's ``grad``.

    Gradients are left untouched; the caller clears them before the next
    backward pass.
    """
    if len(state.m) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")
    for i, p in enumerate(params):
        if p.grad is None:
            name = p.name or f"#{i}"
            raise ValueError(f"parameter {name} has no gradient buffer")
        if state.m[i].shape != p.shape:
            raise ValueError(f"parameter #{i}: moment buffer shape {state.m[i].shape} != {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` once the monitored loss fails
    to improve for ``patience`` consecutive epochs."""

    def __init__(self, factor: float = 0.1, patience: int = 2):
        self.factor = factor
        self.patience = patience
        self.best = float("inf")
        self.bad_epochs = 0

    def update(self, loss: float, lr: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
            return lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            return lr * self.factor
        return lr
