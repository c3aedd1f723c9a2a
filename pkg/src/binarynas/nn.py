"""Parameterized building blocks on top of :mod:`binarynas.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import GradientError, ShapeError, Tensor


# variance 1/fan_in; larger gains made the toy searches less reliable
INIT_GAIN = math.sqrt(3.0)


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class.  Subclasses define ``forward`` and register parameters as attributes."""

    def __init__(self):
        self.calls = 0

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        self.calls += 1
        return self.forward(x)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, dilation=1, depthwise=False):
        super().__init__()
        if depthwise and in_ch != out_ch:
            raise ShapeError("depthwise conv", (in_ch,), (out_ch,))
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.dilation, self.depthwise = kernel, stride, dilation, depthwise
        fan_in = kernel * kernel * (1 if depthwise else in_ch)
        shape = (out_ch, 1 if depthwise else in_ch, kernel, kernel)
        self.weight = Tensor(_uniform(rng, shape, fan_in, INIT_GAIN), requires_grad=True)

    def forward(self, x):
        if x.shape[1:2] != (self.in_ch,):
            raise ShapeError(f"Conv2d({self.in_ch}->{self.out_ch}, k={self.kernel})", ("N", self.in_ch, "H", "W"), x.shape)
        return T.conv2d(x, self.weight, self.stride, self.dilation, depthwise=self.depthwise)


class Affine(Module):
    """Learned per-channel scale and shift."""

    def __init__(self, channels):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def forward(self, x):
        return T.channel_affine(x, self.gamma, self.beta)


class Dense(Module):
    def __init__(self, in_features, out_features, rng):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = Tensor(_uniform(rng, (out_features, in_features), in_features), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (out_features,), in_features), requires_grad=True)

    def forward(self, x):
        if len(x.shape) != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Dense({self.in_features}->{self.out_features})", ("N", self.in_features), x.shape)
        return T.linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Graph:
    """Binds a module to a loss so forward and backward can be driven separately."""

    def __init__(self, module: Module, loss_fn=None):
        self.module = module
        self.loss_fn = loss_fn
        self.output: Tensor | None = None
        self.loss: Tensor | None = None

    def forward(self, x, target=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.output = self.module(x)
        if self.loss_fn is not None:
            self.loss = self.loss_fn(self.output, target)
        else:
            self.loss = T.sum_all(self.output)
        return self.output

    def backward(self, recompute: bool = False) -> dict[str, np.ndarray]:
        """Gradient map over named parameters; unreached parameters map to zeros."""
        if self.loss is None:
            raise GradientError("backward called before forward")
        if recompute:
            T.release(self.loss)
        named = list(self.module.named_parameters())
        grads = T.grad(self.loss, [p for _, p in named])
        return {name: g for (name, _), g in zip(named, grads)}
