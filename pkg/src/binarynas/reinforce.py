"""Score-function (REINFORCE) updates for the architecture parameters."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .gates import sample_gates
from .optim import MaskedAdam
from .space import SuperNet

REWARD_KINDS = ("acc-latency", "acc-only")


class RewardError(ValueError):
    pass


@dataclass
class RewardSpec:
    """``acc * (lat / target_ms) ** w`` (or plain accuracy)."""

    target_ms: float = 1.0
    w: float = 0.0
    kind: str = "acc-latency"

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise RewardError(f"reward.kind must be one of {REWARD_KINDS}, got {self.kind!r}")
        if not self.target_ms > 0:
            raise RewardError(f"reward.target_ms must be > 0, got {self.target_ms}")
        if self.w > 0:
            warnings.warn(f"reward.w = {self.w} > 0 rewards slower architectures", RuntimeWarning, stacklevel=2)


def reward(acc: float, lat: float | None, spec: RewardSpec) -> float:
    if lat is not None and not lat > 0:
        raise RewardError(f"latency must be > 0 ms, got {lat}")
    if spec.kind == "acc-only":
        return float(acc)
    if lat is None:
        raise RewardError("acc-latency reward needs a latency")
    return float(acc) * (lat / spec.target_ms) ** spec.w


@dataclass
class ReinforceState:
    samples: int = 8
    decay: float = 0.99
    baseline: float | None = None
    full_validation: bool = False

    def __post_init__(self):
        if self.samples < 1:
            raise RewardError(f"need at least one sample per update (M >= 1), got {self.samples}")
        if not 0.0 <= self.decay < 1.0:
            raise RewardError(f"baseline decay must be in [0, 1), got {self.decay}")

    def update(self, rewards: Sequence[float]) -> None:
        mean = float(np.mean(rewards))
        if self.baseline is None:
            self.baseline = mean
        else:
            self.baseline = self.decay * self.baseline + (1.0 - self.decay) * mean


def log_prob_grad(p: np.ndarray, k: int) -> np.ndarray:
    """``d log p_k / d alpha`` for ``p = softmax(alpha)``."""
    g = -np.asarray(p, dtype=np.float64)
    g[k] += 1.0
    return g


def score_function_gradient(probs: Sequence[np.ndarray], choices, rewards, baseline: float = 0.0) -> list[np.ndarray]:
    """Monte-Carlo ``grad J = mean_i (R_i - b) * grad log p(g^i)``, one array per edge.

    ``choices`` has shape (M, edges).  ``log p(g)`` is a sum over edges, so the
    joint score splits into one ``onehot - p`` term per edge.
    """
    choices = np.asarray(choices, dtype=np.int64).reshape(len(rewards), len(probs))
    adv = np.asarray(rewards, dtype=np.float64) - baseline
    out = []
    for e, p in enumerate(probs):
        p = np.asarray(p, dtype=np.float64)
        counts = np.zeros(len(p))
        np.add.at(counts, choices[:, e], adv)
        out.append((counts - adv.sum() * p) / len(adv))
    return out


def exact_gradient(probs: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    """``grad_alpha sum_i p_i R_i`` for a single edge."""
    p = np.asarray(probs, dtype=np.float64)
    r = np.asarray(rewards, dtype=np.float64)
    return p * (r - p @ r)


def sampled_latency(choices: Sequence[int], latencies: Sequence[np.ndarray], fixed_ms: float) -> float:
    return fixed_ms + float(sum(lat[k] for lat, k in zip(latencies, choices)))


def reinforce_arch_step(net: SuperNet, batch, spec: RewardSpec, state: ReinforceState, adam: MaskedAdam,
                        rng: np.random.Generator, latencies=None, fixed_ms: float = 0.0) -> float:
    """Sample ``M`` architectures, score them on ``batch`` and ascend the estimate.

    Returns the mean reward of the samples.
    """
    x, y = batch
    if len(y) == 0:
        raise ValueError("empty validation batch")
    edges = net.edges
    probs = [e.probs for e in edges]
    choices, rewards = [], []
    xt = T.Tensor(x)
    with T.no_grad():
        for _ in range(state.samples):
            ks = []
            for e in edges:
                k = sample_gates(e, rng).active
                e.set_gate(k)
                ks.append(k)
            logits = net(xt, "binary").data
            acc = float(np.mean(np.argmax(logits, axis=1) == y))
            lat = sampled_latency(ks, latencies, fixed_ms) if latencies is not None else None
            choices.append(ks)
            rewards.append(reward(acc, lat, spec))
    if state.baseline is None:
        state.update(rewards)
    grads = score_function_gradient(probs, choices, rewards, state.baseline)
    state.update(rewards)
    for i, e in enumerate(edges):
        if len(e) >= 2:
            e.alpha = adam.step(i, e.alpha, -grads[i])
    return float(np.mean(rewards))
