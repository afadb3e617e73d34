"""Dense NCHW tensors with reverse-mode differentiation.

Only the handful of operations the pose network needs are provided: 2D
convolution, ReLU, sigmoid, elementwise add, constant scaling, nearest
neighbour x2 resampling and a full reduction.  Loss functions live in
``losses`` and plug into the same graph through :func:`custom_op`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand extents do not satisfy an operation's shape rule."""


_AXES = ("batch", "channels", "height", "width")


class Tensor:
    """A numpy array plus an optional gradient buffer and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Back-propagate from this tensor, accumulating into every leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a single-element tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # interior gradients are scratch; leaves keep theirs
        for node in order:
            if node._backward is not None:
                node.grad = None
        self.accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None

    # sugar used by model code
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap a forward result computed outside this module into the graph.

    ``backward(grad)`` must call ``accumulate`` on whichever parents need it.
    """
    return _result(np.asarray(data), parents, backward)


def _require_4d(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what}: expected a 4-d NCHW tensor, got shape {x.shape}")


def _out_extent(size: int, k: int, stride: int, pad: int, axis: str) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: {axis} extent {size} with kernel {k}, padding {pad}, stride {stride} "
            f"does not tile exactly"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIkk kernel."""
    _require_4d(x, "conv2d input")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be out x in x kH x kW, got {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d: channels axis mismatch, input has {c} but weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias must have shape ({o},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be positive and padding non-negative")
    ho = _out_extent(h, kh, stride, padding, "height")
    wo = _out_extent(w, kw, stride, padding, "width")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if kh == 1 and kw == 1:
        xs = xp[:, :, ::stride, ::stride] if stride > 1 else xp
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        if stride > 1:
            win = win[:, :, ::stride, ::stride]
        # (N, Ho, Wo, C, kh, kw) rows, contiguous for the matmul
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if weight.requires_grad:
            weight.accumulate((gm.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate(gm.sum(axis=0))
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            x.accumulate(dxp)

    return _result(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)

    def backward(g: np.ndarray) -> None:
        x.accumulate(g * mask)

    return _result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)

    def backward(g: np.ndarray) -> None:
        x.accumulate(g * out * (1 - out))

    return _result(out, (x,), backward)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        axes = [
            _AXES[i] if a.data.ndim == 4 else str(i)
            for i in range(min(a.data.ndim, b.data.ndim))
            if a.shape[i] != b.shape[i]
        ]
        where = ", ".join(axes) if axes else "rank"
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape} (axis: {where})")
    out = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _result(out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * x.data.dtype.type(factor)

    def backward(g: np.ndarray) -> None:
        x.accumulate(g * factor)

    return _result(out, (x,), backward)


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 1x1x1x1 tensor."""
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype).reshape(1, 1, 1, 1)

    def backward(g: np.ndarray) -> None:
        x.accumulate(np.broadcast_to(g.reshape(()), x.shape))

    return _result(out, (x,), backward)


def resize_nearest(x: Tensor, factor: str) -> Tensor:
    """Nearest-neighbour resampling by two: ``factor`` is ``"up"`` or ``"down"``."""
    _require_4d(x, "resize_nearest")
    n, c, h, w = x.shape
    if factor == "up":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3)

        def backward(g: np.ndarray) -> None:
            x.accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    elif factor == "down":
        if h % 2 or w % 2:
            raise ShapeError(f"resize_nearest: cannot halve odd extents height={h}, width={w}")
        out = np.ascontiguousarray(x.data[:, :, ::2, ::2])

        def backward(g: np.ndarray) -> None:
            gx = np.zeros(x.shape, dtype=x.data.dtype)
            gx[:, :, ::2, ::2] = g
            x.accumulate(gx)

    else:
        raise ValueError(f"resize_nearest: factor must be 'up' or 'down', got {factor!r}")
    return _result(out, (x,), backward)


def up2(x: Tensor) -> Tensor:
    return resize_nearest(x, "up")


def down2(x: Tensor) -> Tensor:
    return resize_nearest(x, "down")


def sum_of_squares(params: Sequence[Tensor]) -> Tensor:
    """sum(w**2) over several tensors, as a 1x1x1x1 tensor."""
    acc = sum(float(np.sum(p.data.astype(np.float64) ** 2)) for p in params)
    dtype = params[0].data.dtype if params else np.float32
    out = np.full((1, 1, 1, 1), acc, dtype=dtype)

    def backward(g: np.ndarray) -> None:
        s = g.reshape(())
        for p in params:
            if p.requires_grad:
                p.accumulate(2 * s * p.data)

    return _result(out, params, backward)
