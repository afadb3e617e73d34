"""Finite-difference gradient checking for graph operations."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def numeric_gradient(fn: Callable[[], float], array: np.ndarray, eps: float = 1e-6,
                     indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. entries of ``array`` (modified in place
    and restored).  Only ``indices`` (flat) are probed when given."""
    flat = array.reshape(-1)
    grad = np.zeros_like(flat)
    idx = np.arange(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        up = fn()
        flat[i] = old - eps
        down = fn()
        flat[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad.reshape(array.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); zero when both vanish."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(build: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor],
                    eps: float = 1e-6, max_probes: int = 200,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Largest relative error between backprop and central differences over
    all ``inputs`` of the scalar graph ``build(inputs)``.

    Inputs must be float64 tensors with ``requires_grad``.  Arrays larger than
    ``max_probes`` entries are probed at a random subset of positions.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks need float64 inputs")
        t.grad = None
    out = build(inputs)
    if out.data.size != 1:
        raise ValueError("gradient check needs a scalar output")
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        size = t.data.size
        idx = None if size <= max_probes else rng.choice(size, max_probes, replace=False)
        numeric = numeric_gradient(lambda: float(build(inputs).data.reshape(-1)[0]), t.data, eps, idx)
        if idx is not None:
            analytic = analytic.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        worst = max(worst, relative_error(analytic, numeric))
    return worst
