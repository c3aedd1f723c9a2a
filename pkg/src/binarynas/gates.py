"""Binary gate sampling and the architecture-gradient pieces built on it."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .space import GateSample, MixedEdge


class GateGradError(RuntimeError):
    pass


def softmax(alpha) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    z = np.exp(a - a.max())
    return z / z.sum()


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    k = int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"))
    return min(k, len(p) - 1)


def sample_gates(edge_or_probs, rng: np.random.Generator) -> GateSample:
    """One-hot gate drawn from multinomial(p)."""
    p = edge_or_probs.probs if isinstance(edge_or_probs, MixedEdge) else np.asarray(edge_or_probs, float)
    k = _draw(p, rng)
    return GateSample(k, (k,))


def sample_pair(p: np.ndarray, rng: np.random.Generator) -> tuple[int, int]:
    """Two distinct indices drawn sequentially from multinomial(p) without replacement."""
    p = np.asarray(p, dtype=np.float64)
    if len(p) < 2:
        raise ValueError(f"two-path sampling needs at least 2 candidates, got {len(p)}")
    a = _draw(p, rng)
    q = p.copy()
    q[a] = 0.0
    if q.sum() <= 0.0:
        q = np.ones_like(p)
        q[a] = 0.0
    b = _draw(q, rng)
    return a, b


def sample_two_path(edge: MixedEdge, rng: np.random.Generator) -> GateSample:
    """Pick a pair, renormalize their weights, and draw the active path among them."""
    a, b = sample_pair(edge.probs, rng)
    w = softmax(edge.alpha[[a, b]])
    active = (a, b)[_draw(w, rng)]
    return GateSample(active, (a, b), w)


def softmax_jacobian_vec(p, dLdg) -> np.ndarray:
    """``dL/d alpha_i = sum_j dL/dg_j * p_j * (delta_ij - p_i)``."""
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(dLdg, dtype=np.float64)
    if p.shape != v.shape:
        raise ValueError(f"length mismatch: {len(p)} weights, {len(v)} gate gradients")
    return p * (v - p @ v)


def gate_grads(edge: MixedEdge, upstream: np.ndarray | None = None, policy: str = "recompute") -> np.ndarray:
    """``dL/dg_j = reduce_sum(grad_y L * o_j(x))`` for every path in the sampled support.

    Entries outside the support are 0.  The active path reuses the edge's own
    output.  Inactive paths come from the forward-time cache (``cached``) or
    are evaluated here one at a time and dropped (``recompute``).
    """
    sample = edge.sample
    if sample is None:
        raise GateGradError(f"{edge.name}: gates not sampled")
    if upstream is None:
        if edge.last_output is None or edge.last_output.grad is None:
            raise GateGradError(f"{edge.name}: no upstream gradient; run forward and backward first")
        upstream = edge.last_output.grad
    out = np.zeros(len(edge))
    for j in sample.support:
        if edge.ops[j].kind == "zero":
            continue
        if j == sample.active:
            out[j] = np.sum(upstream * edge.last_output.data)
        elif policy == "cached":
            if j not in edge.cached_outputs:
                raise GateGradError(f"{edge.name}: output of path {j} was not cached during forward")
            out[j] = np.sum(upstream * edge.cached_outputs[j])
        elif policy == "recompute":
            if edge.last_input is None:
                raise GateGradError(f"{edge.name}: edge input was not cached; cannot recompute")
            with T.no_grad():
                oj = edge.candidates[j](edge.last_input).data
            edge.meter.alloc()
            out[j] = np.sum(upstream * oj)
            del oj
            edge.meter.free()
        else:
            raise ValueError(f"unknown gate-grad policy {policy!r}")
    return out


def rescale_pair(alpha, a: int, b: int, old_a: float, old_b: float) -> np.ndarray:
    """Shift the updated pair by ``ln r`` so ``exp(alpha_a) + exp(alpha_b)`` is restored.

    ``r = (e^old_a + e^old_b) / (e^new_a + e^new_b)``; the full-softmax weight of
    every other path is then unchanged.
    """
    alpha = np.array(alpha, dtype=np.float64)
    new = alpha[[a, b]]
    old = np.array([old_a, old_b], dtype=np.float64)
    log_r = np.logaddexp(old[0], old[1]) - np.logaddexp(new[0], new[1])
    alpha[a] += log_r
    alpha[b] += log_r
    return alpha


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
