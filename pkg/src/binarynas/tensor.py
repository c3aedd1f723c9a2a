"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable result holds a reference to the :class:`Function` that
produced it.  A node's forward value may be released and is then recomputed
from its parents on demand, so a graph can be differentiated either with all
intermediates cached or with them dropped after the forward pass.
"""

from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Function",
    "ShapeError",
    "GradientError",
    "no_grad",
    "grad_enabled",
    "debug_mode",
    "backward",
    "grad",
    "release",
    "topo_order",
    "linear",
    "conv2d",
    "avg_pool2d",
    "max_pool2d",
    "relu",
    "channel_affine",
    "softmax",
    "cross_entropy",
    "add",
    "mul",
    "scale",
    "zeros_like",
    "identity",
    "weighted_sum",
    "global_avg_pool",
    "flatten",
    "sum_all",
    "square_sum",
]

_GRAD_ENABLED = True
_DEBUG = False


class ShapeError(ValueError):
    """Raised when a node receives inputs of the wrong shape."""

    def __init__(self, node: str, expected, actual):
        self.node = node
        self.expected = tuple(expected) if expected is not None else None
        self.actual = tuple(actual)
        super().__init__(f"{node}: expected shape {self.expected}, got {self.actual}")


class GradientError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every forward result for NaN/Inf while active."""
    global _DEBUG
    prev, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = prev


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("_data", "shape", "grad", "requires_grad", "ctx", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self._data = arr
        self.shape = arr.shape
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.ctx: Function | None = None
        self.name = name

    @classmethod
    def _from_function(cls, data: np.ndarray, fn: "Function") -> "Tensor":
        t = cls.__new__(cls)
        t._data = data
        t.shape = data.shape
        t.grad = None
        t.requires_grad = True
        t.ctx = fn
        t.name = None
        return t

    @property
    def data(self) -> np.ndarray:
        if self._data is None:
            if self.ctx is None:
                raise GradientError(f"tensor {self.name or id(self)} has no value and no producer")
            self._data = self.ctx.run()
        return self._data

    @data.setter
    def data(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.shape:
            raise ShapeError(self.name or "tensor", self.shape, value.shape)
        self._data = value

    @property
    def cached(self) -> bool:
        return self._data is not None

    def release(self) -> None:
        """Drop the forward value; it is rebuilt from the parents when needed."""
        if self.ctx is None:
            raise GradientError("leaf tensors cannot release their value")
        self._data = None

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """One recorded operation.

    Subclasses implement ``forward(*arrays)`` and
    ``backward(grad_out, *arrays, out=...)``; the latter returns one gradient
    (or ``None``) per parent.
    """

    kind = "op"

    def __init__(self, *parents: Tensor):
        self.parents = parents

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray, *arrays: np.ndarray, out: np.ndarray):
        raise NotImplementedError

    def run(self) -> np.ndarray:
        return self.forward(*(p.data for p in self.parents))

    @classmethod
    def apply(cls, *parents, **attrs) -> Tensor:
        parents = tuple(_as_tensor(p) for p in parents)
        fn = cls(*parents)
        for k, v in attrs.items():
            setattr(fn, k, v)
        fn.check(*(p.shape for p in parents))
        out = fn.run()
        if _DEBUG and not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{cls.kind}: non-finite values in output")
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            return Tensor._from_function(out, fn)
        return Tensor(out)

    def check(self, *shapes) -> None:
        pass


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.ctx is not None:
            for p in reversed(node.ctx.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node that needs it.

    Returns the gradient map keyed by ``id(node)``.
    """
    if loss.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")
    order = topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        fn = node.ctx
        if fn is None:
            continue
        in_grads = fn.backward(g, *(p.data for p in fn.parents), out=node.data)
        for p, pg in zip(fn.parents, in_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``wrt``; unreached tensors get zeros."""
    gmap = backward(loss)
    return [gmap.get(id(t), np.zeros(t.shape)) for t in wrt]


def release(root: Tensor) -> int:
    """Release the cached value of every interior node under ``root``."""
    n = 0
    for node in topo_order(root):
        if node.ctx is not None and node is not root:
            node._data = None
            n += 1
    return n


# ---------------------------------------------------------------------------
# op library


class Linear(Function):
    kind = "linear"

    def check(self, xs, ws, bs):
        if len(xs) != 2 or len(ws) != 2 or xs[1] != ws[1]:
            raise ShapeError("linear", (xs[0] if xs else None, ws[1] if len(ws) == 2 else None), xs)
        if bs != (ws[0],):
            raise ShapeError("linear.bias", (ws[0],), bs)

    def forward(self, x, w, b):
        return x @ w.T + b

    def backward(self, g, x, w, b, out):
        return g @ w, g.T @ x, g.sum(axis=0)


def linear(x, w, b) -> Tensor:
    """Dense layer: ``x @ w.T + b`` with ``w`` of shape (out, in)."""
    return Linear.apply(x, w, b)


def _conv_geometry(h, k, stride, dilation, padding):
    return (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _window(xp, ki, kj, dilation, stride, ho, wo):
    i0, j0 = ki * dilation, kj * dilation
    return (
        slice(None),
        slice(None),
        slice(i0, i0 + stride * (ho - 1) + 1, stride),
        slice(j0, j0 + stride * (wo - 1) + 1, stride),
    )


class Conv2d(Function):
    kind = "conv2d"
    stride = 1
    dilation = 1
    padding = 0
    depthwise = False

    def check(self, xs, ws):
        if len(xs) != 4:
            raise ShapeError("conv2d", ("N", "C", "H", "W"), xs)
        if len(ws) != 4 or ws[2] != ws[3]:
            raise ShapeError("conv2d.weight", ("O", "C", "k", "k"), ws)
        c = xs[1]
        if self.depthwise:
            if ws[0] != c or ws[1] != 1:
                raise ShapeError("conv2d.depthwise_weight", (c, 1, ws[2], ws[3]), ws)
        elif ws[1] != c:
            raise ShapeError("conv2d.weight", (ws[0], c, ws[2], ws[3]), ws)
        ho = _conv_geometry(xs[2], ws[2], self.stride, self.dilation, self.padding)
        wo = _conv_geometry(xs[3], ws[3], self.stride, self.dilation, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError("conv2d", ("N", c, "H>=k", "W>=k"), xs)

    def _pad(self, x):
        p = self.padding
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x

    def forward(self, x, w):
        k = w.shape[2]
        ho = _conv_geometry(x.shape[2], k, self.stride, self.dilation, self.padding)
        wo = _conv_geometry(x.shape[3], k, self.stride, self.dilation, self.padding)
        xp = self._pad(x)
        out = np.zeros((x.shape[0], w.shape[0], ho, wo))
        for ki in range(k):
            for kj in range(k):
                patch = xp[_window(xp, ki, kj, self.dilation, self.stride, ho, wo)]
                if self.depthwise:
                    out += patch * w[:, 0, ki, kj][None, :, None, None]
                else:
                    out += np.einsum("nchw,oc->nohw", patch, w[:, :, ki, kj])
        return out

    def backward(self, g, x, w, out):
        k = w.shape[2]
        ho, wo = g.shape[2], g.shape[3]
        xp = self._pad(x)
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        for ki in range(k):
            for kj in range(k):
                win = _window(xp, ki, kj, self.dilation, self.stride, ho, wo)
                patch = xp[win]
                if self.depthwise:
                    dxp[win] += g * w[:, 0, ki, kj][None, :, None, None]
                    dw[:, 0, ki, kj] = np.sum(g * patch, axis=(0, 2, 3))
                else:
                    dxp[win] += np.einsum("nohw,oc->nchw", g, w[:, :, ki, kj])
                    dw[:, :, ki, kj] = np.einsum("nohw,nchw->oc", g, patch)
        p = self.padding
        dx = dxp[:, :, p : p + x.shape[2], p : p + x.shape[3]] if p else dxp
        return dx, dw


def conv2d(x, w, stride: int = 1, dilation: int = 1, padding: int | None = None, depthwise: bool = False) -> Tensor:
    """2-D convolution in NCHW layout without bias.

    ``padding`` defaults to "same" for stride 1.  With ``depthwise`` the
    weight has shape (C, 1, k, k) and each channel is filtered separately.
    """
    k = _as_tensor(w).shape[2]
    if padding is None:
        padding = dilation * (k - 1) // 2
    return Conv2d.apply(x, w, stride=stride, dilation=dilation, padding=padding, depthwise=depthwise)


class _Pool(Function):
    stride = 1
    size = 3

    def check(self, xs):
        if len(xs) != 4:
            raise ShapeError(self.kind, ("N", "C", "H", "W"), xs)

    def geometry(self, x):
        pad = self.size // 2
        ho = _conv_geometry(x.shape[2], self.size, self.stride, 1, pad)
        wo = _conv_geometry(x.shape[3], self.size, self.stride, 1, pad)
        return pad, ho, wo


class AvgPool2d(_Pool):
    """Average over a 3x3 window; padded positions count as zeros."""

    kind = "avg_pool2d"

    def forward(self, x):
        pad, ho, wo = self.geometry(x)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.zeros(x.shape[:2] + (ho, wo))
        for ki in range(self.size):
            for kj in range(self.size):
                out += xp[_window(xp, ki, kj, 1, self.stride, ho, wo)]
        return out / (self.size * self.size)

    def backward(self, g, x, out):
        pad, ho, wo = self.geometry(x)
        dxp = np.zeros((x.shape[0], x.shape[1], x.shape[2] + 2 * pad, x.shape[3] + 2 * pad))
        gs = g / (self.size * self.size)
        for ki in range(self.size):
            for kj in range(self.size):
                dxp[_window(dxp, ki, kj, 1, self.stride, ho, wo)] += gs
        return (dxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]],)


class MaxPool2d(_Pool):
    kind = "max_pool2d"

    def _stack(self, x):
        pad, ho, wo = self.geometry(x)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
        wins = [
            _window(xp, ki, kj, 1, self.stride, ho, wo)
            for ki in range(self.size)
            for kj in range(self.size)
        ]
        return xp, wins, np.stack([xp[w] for w in wins])

    def forward(self, x):
        _, _, stacked = self._stack(x)
        return stacked.max(axis=0)

    def backward(self, g, x, out):
        pad = self.size // 2
        xp, wins, stacked = self._stack(x)
        arg = stacked.argmax(axis=0)
        dxp = np.zeros_like(xp)
        for idx, win in enumerate(wins):
            dxp[win] += np.where(arg == idx, g, 0.0)
        return (dxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]],)


def avg_pool2d(x, stride: int = 1) -> Tensor:
    return AvgPool2d.apply(x, stride=stride)


def max_pool2d(x, stride: int = 1) -> Tensor:
    return MaxPool2d.apply(x, stride=stride)


class ReLU(Function):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, g, x, out):
        return (g * (x > 0),)


def relu(x) -> Tensor:
    return ReLU.apply(x)


class ChannelAffine(Function):
    """Per-channel ``gamma * x + beta`` on NCHW input (no batch statistics)."""

    kind = "channel_affine"

    def check(self, xs, gs, bs):
        if len(xs) != 4 or gs != (xs[1],) or bs != (xs[1],):
            raise ShapeError("channel_affine", ("N", gs[0] if gs else "C", "H", "W"), xs)

    def forward(self, x, gamma, beta):
        return x * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(self, g, x, gamma, beta, out):
        return (
            g * gamma[None, :, None, None],
            np.sum(g * x, axis=(0, 2, 3)),
            np.sum(g, axis=(0, 2, 3)),
        )


def channel_affine(x, gamma, beta) -> Tensor:
    return ChannelAffine.apply(x, gamma, beta)


def _softmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Function):
    kind = "softmax"

    def forward(self, x):
        return _softmax(x)

    def backward(self, g, x, out):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


def softmax(x) -> Tensor:
    """Softmax along the last axis."""
    return Softmax.apply(x)


class CrossEntropy(Function):
    """Mean cross-entropy between logits (B, K) and integer labels."""

    kind = "cross_entropy"

    def check(self, ls):
        if len(ls) != 2 or len(self.labels) != ls[0]:
            raise ShapeError("cross_entropy", (len(self.labels), "K"), ls)

    def forward(self, logits):
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        return np.asarray(np.mean(lse - z[np.arange(len(z)), self.labels]))

    def backward(self, g, logits, out):
        p = _softmax(logits, axis=1)
        p[np.arange(len(p)), self.labels] -= 1.0
        return (g * p / len(p),)


def cross_entropy(logits, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    return CrossEntropy.apply(logits, labels=labels)


class _Binary(Function):
    def check(self, a, b):
        if a != b:
            raise ShapeError(self.kind, a, b)


class Add(_Binary):
    kind = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, g, a, b, out):
        return g, g


class Mul(_Binary):
    kind = "mul"

    def forward(self, a, b):
        return a * b

    def backward(self, g, a, b, out):
        return g * b, g * a


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


class Scale(Function):
    kind = "scale"
    factor = 1.0

    def forward(self, x):
        return x * self.factor

    def backward(self, g, x, out):
        return (g * self.factor,)


def scale(x, factor: float) -> Tensor:
    return Scale.apply(x, factor=float(factor))


def zeros_like(x) -> Tensor:
    """Constant zero tensor; carries no gradient."""
    return Tensor(np.zeros(_as_tensor(x).shape))


class Identity(Function):
    """Copies its input into a fresh node so the result has its own gradient slot."""

    kind = "identity"

    def forward(self, x):
        return x.copy()

    def backward(self, g, x, out):
        return (g,)


def identity(x) -> Tensor:
    return Identity.apply(x)


class WeightedSum(Function):
    """``sum_i w[i] * xs[i]`` for equally shaped ``xs`` and a weight vector ``w``."""

    kind = "weighted_sum"

    def check(self, *shapes):
        *xs, ws = shapes
        if ws != (len(xs),):
            raise ShapeError("weighted_sum.weights", (len(xs),), ws)
        for s in xs[1:]:
            if s != xs[0]:
                raise ShapeError("weighted_sum", xs[0], s)

    def forward(self, *arrays):
        *xs, w = arrays
        out = np.zeros_like(xs[0])
        for wi, xi in zip(w, xs):
            out += wi * xi
        return out

    def backward(self, g, *arrays, out):
        *xs, w = arrays
        gx = [g * wi for wi in w]
        gw = np.array([np.sum(g * xi) for xi in xs])
        return (*gx, gw)


def weighted_sum(xs: Sequence[Tensor], w) -> Tensor:
    return WeightedSum.apply(*xs, w)


class GlobalAvgPool(Function):
    kind = "global_avg_pool"

    def check(self, xs):
        if len(xs) != 4:
            raise ShapeError("global_avg_pool", ("N", "C", "H", "W"), xs)

    def forward(self, x):
        return x.mean(axis=(2, 3))

    def backward(self, g, x, out):
        hw = x.shape[2] * x.shape[3]
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)


def global_avg_pool(x) -> Tensor:
    return GlobalAvgPool.apply(x)


class Flatten(Function):
    kind = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, g, x, out):
        return (g.reshape(x.shape),)


def flatten(x) -> Tensor:
    return Flatten.apply(x)


class SumAll(Function):
    kind = "sum"

    def forward(self, x):
        return np.asarray(x.sum())

    def backward(self, g, x, out):
        return (np.full(x.shape, float(g)),)


def sum_all(x) -> Tensor:
    return SumAll.apply(x)


class SquareSum(Function):
    kind = "square_sum"

    def forward(self, x):
        return np.asarray(np.sum(x * x))

    def backward(self, g, x, out):
        return (2.0 * float(g) * x,)


def square_sum(x) -> Tensor:
    return SquareSum.apply(x)
