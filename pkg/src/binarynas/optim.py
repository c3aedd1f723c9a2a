from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


class SGD:
    """SGD with momentum and L2 decay.

    Parameters whose ``grad`` is ``None`` (not reached by the last backward)
    are skipped entirely, momentum included.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + 2.0 * self.weight_decay * p.data
            v = self.velocity.get(id(p))
            v = g if v is None else self.momentum * v + g
            self.velocity[id(p)] = v
            p.data = p.data - lr * v


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


class MaskedAdam:
    """Adam over a set of vectors where each step may touch only some entries.

    Moments and bias-correction counters are kept per entry, so entries that
    are not updated keep their state untouched.
    """

    def __init__(self, sizes: Sequence[int], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros(n) for n in sizes]
        self.v = [np.zeros(n) for n in sizes]
        self.t = [np.zeros(n, dtype=np.int64) for n in sizes]

    def step(self, i: int, value: np.ndarray, grad: np.ndarray, index=None) -> np.ndarray:
        """Return ``value`` after one descent step on ``grad`` restricted to ``index``.

        ``grad`` is full length; entries outside ``index`` are ignored.
        """
        idx = np.arange(len(value)) if index is None else np.asarray(index)
        out = np.array(value, dtype=np.float64)
        g = np.asarray(grad, dtype=np.float64)[idx]
        m, v, t = self.m[i], self.v[i], self.t[i]
        t[idx] += 1
        m[idx] = self.b1 * m[idx] + (1 - self.b1) * g
        v[idx] = self.b2 * v[idx] + (1 - self.b2) * g * g
        mhat = m[idx] / (1 - self.b1 ** t[idx])
        vhat = v[idx] / (1 - self.b2 ** t[idx])
        out[idx] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out
