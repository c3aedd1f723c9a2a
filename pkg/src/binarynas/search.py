"""Alternating weight / architecture optimization over a supernet."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import Dataset
from .gates import (
    entropy,
    gate_grads,
    rescale_pair,
    sample_gates,
    sample_two_path,
    softmax_jacobian_vec,
)
from .latency import LatencyModel, expected_net_latency, fixed_latency, op_latencies
from .optim import SGD, MaskedAdam, cosine_lr
from .reinforce import ReinforceState, RewardSpec, reinforce_arch_step
from .space import ChainNet, GateSample, SuperNet

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "phase", "loss", "val_acc", "expected_latency_ms", "mean_edge_entropy")
STREAMS = {"weights": 0, "gates": 1, "data": 2, "split": 3, "val": 4}


class ScheduleError(ValueError):
    pass


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from the run seed."""
    return np.random.default_rng([int(seed), STREAMS[name]])


@dataclass
class TrainSchedule:
    epochs: int = 10
    batch_size: int = 32
    weight_steps: int | None = None  # per round; None means one pass over the training set
    arch_steps: int = 1  # per round
    weight_lr: float = 0.05
    momentum: float = 0.9
    arch_lr: float | None = None  # 0.006 for gradient, 0.01 for reinforce
    arch_batch_size: int | None = None
    val_fraction: float = 0.2
    arch_update: str = "two-path"  # or "full"
    cache_policy: str = "recompute"

    def validate(self, need_arch: bool = True) -> None:
        if self.epochs < 1:
            raise ScheduleError("schedule.epochs must be >= 1")
        if self.batch_size < 1:
            raise ScheduleError("schedule.batch_size must be >= 1")
        if self.weight_steps is not None and self.weight_steps < 1:
            raise ScheduleError("schedule.weight_steps must be >= 1")
        if need_arch and self.arch_steps < 1:
            raise ScheduleError("schedule.arch_steps must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ScheduleError("schedule.val_fraction must be in (0, 1)")
        if self.arch_update not in ("two-path", "full"):
            raise ScheduleError(f"schedule.arch_update must be 'two-path' or 'full', got {self.arch_update!r}")


@dataclass
class LossSpec:
    lambda1: float = 0.0  # weight decay
    lambda2: float = 0.0  # latency scale
    latency: bool = False

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ScheduleError("lambda1 and lambda2 must be >= 0")

    @property
    def active(self) -> bool:
        return self.latency and self.lambda2 > 0


@dataclass
class SearchReport:
    alphas: list[list[float]]
    probs: list[list[float]]
    chosen: list[int]
    metrics: list[dict] = field(default_factory=list)
    final_val_acc: float = float("nan")
    best_val_acc: float = float("nan")
    expected_latency_ms: float | None = None

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


def batch_stream(ds: Dataset, batch_size: int, rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless batches, reshuffled every pass."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    while True:
        yield from ds.batches(batch_size, rng)


# ---------------------------------------------------------------------------
# weight training


def train_step(net: ChainNet, batch, opt: SGD, lr: float, mode: str = "binary") -> float:
    """One SGD step on the cross-entropy of ``batch``."""
    x, y = batch
    if len(y) == 0:
        raise ValueError("empty batch")
    opt.zero_grad()
    loss = T.cross_entropy(net(T.Tensor(x), mode), y)
    T.backward(loss)
    opt.step(lr)
    return loss.item()


def weight_step(net: SuperNet, batch, opt: SGD, rng: np.random.Generator, lr: float, mode: str = "binary") -> float:
    """Resample one gate per edge, then update the weights of the active paths."""
    if len(batch[1]) == 0:
        raise ValueError("empty batch")
    if mode == "binary":
        for e in net.edges:
            s = sample_gates(e, rng)
            e.set_gate(s.active)
    return train_step(net, batch, opt, lr, mode)


def evaluate(net: ChainNet, ds: Dataset, mode: str = "binary", batch_size: int = 256) -> tuple[float, float]:
    """(mean loss, accuracy) on ``ds`` without recording a graph."""
    total_loss, correct = 0.0, 0
    with T.no_grad():
        for x, y in ds.batches(batch_size):
            logits = net(T.Tensor(x), mode)
            total_loss += T.cross_entropy(logits, y).item() * len(y)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
    return total_loss / len(ds), correct / len(ds)


def argmax_choices(net: SuperNet) -> list[int]:
    # np.argmax returns the lowest index on ties
    return [int(np.argmax(e.probs)) for e in net.edges]


def evaluate_derived(net: SuperNet, ds: Dataset) -> float:
    saved = [e.sample for e in net.edges]
    for e, k in zip(net.edges, argmax_choices(net)):
        e.set_gate(k)
    _, acc = evaluate(net, ds)
    for e, s in zip(net.edges, saved):
        e.sample = s
    return acc


# ---------------------------------------------------------------------------
# architecture updates


def _forward_backward(net: SuperNet, batch) -> float:
    x, y = batch
    if len(y) == 0:
        raise ValueError("empty batch")
    loss = T.cross_entropy(net(T.Tensor(x), "binary"), y)
    T.backward(loss)
    return loss.item()


def binary_arch_gradients(net: SuperNet, batch, policy: str = "recompute", latencies=None,
                          lambda2: float = 0.0) -> tuple[float, list[np.ndarray | None]]:
    """Forward/backward on ``batch`` with the gates already on the edges.

    Returns the loss and, for every edge with at least two candidates, the
    estimated ``dL/d alpha`` restricted to the sampled support (zeros
    elsewhere).  The softmax over the support uses the sample's weights.
    """
    net.set_cache_policy(policy)
    loss = _forward_backward(net, batch)
    grads: list[np.ndarray | None] = []
    for i, e in enumerate(net.edges):
        if len(e) < 2:
            grads.append(None)
            continue
        support = list(e.sample.support)
        w = e.sample.weights if e.sample.weights is not None else e.probs[support] / e.probs[support].sum()
        dLdg = gate_grads(e, policy=policy)
        g = softmax_jacobian_vec(w, dLdg[support])
        if latencies is not None and lambda2 > 0:
            g = g + lambda2 * softmax_jacobian_vec(w, latencies[i][support])
        full = np.zeros(len(e))
        full[support] = g
        grads.append(full)
    return loss, grads


def _searchable_or_fail(net: SuperNet) -> list[int]:
    idx = [i for i, e in enumerate(net.edges) if len(e) >= 2]
    if not idx:
        raise ScheduleError("no edge has two or more candidates; nothing to search")
    return idx


def two_path_arch_step(net: SuperNet, batch, adam: MaskedAdam, rng: np.random.Generator, policy: str = "recompute",
                       latencies=None, lambda2: float = 0.0) -> float:
    """Two sampled paths per edge compete; the pair is rescaled so the rest keep their weight."""
    idx = _searchable_or_fail(net)
    for e in net.edges:
        if len(e) >= 2:
            e.sample = sample_two_path(e, rng)
        else:
            e.set_gate(0)
    loss, grads = binary_arch_gradients(net, batch, policy, latencies, lambda2)
    for i in idx:
        e = net.edges[i]
        a, b = e.sample.support
        old_a, old_b = e.alpha[a], e.alpha[b]
        updated = adam.step(i, e.alpha, grads[i], index=[a, b])
        e.alpha = rescale_pair(updated, a, b, old_a, old_b)
    return loss


def full_arch_step(net: SuperNet, batch, adam: MaskedAdam, rng: np.random.Generator, policy: str = "recompute",
                   latencies=None, lambda2: float = 0.0) -> float:
    """All ``N`` gate gradients per edge, no pair sampling."""
    idx = _searchable_or_fail(net)
    for e in net.edges:
        s = sample_gates(e, rng)
        e.sample = GateSample(s.active, tuple(range(len(e))), e.probs)
    loss, grads = binary_arch_gradients(net, batch, policy, latencies, lambda2)
    for i in idx:
        e = net.edges[i]
        e.alpha = adam.step(i, e.alpha, grads[i])
    return loss


def darts_arch_step(net: SuperNet, batch, adam: MaskedAdam, latencies=None, lambda2: float = 0.0) -> float:
    """Exact ``dL/d alpha`` through the softmax-weighted sum of all paths."""
    idx = _searchable_or_fail(net)
    x, y = batch
    loss = T.cross_entropy(net(T.Tensor(x), "darts"), y)
    T.backward(loss)
    for i in idx:
        e = net.edges[i]
        g = e.alpha_grad.copy()
        if latencies is not None and lambda2 > 0:
            g += lambda2 * softmax_jacobian_vec(e.probs, latencies[i])
        e.alpha = adam.step(i, e.alpha, g)
    return loss.item()


# ---------------------------------------------------------------------------
# driver


def run_search(net: SuperNet, train: Dataset, val: Dataset, schedule: TrainSchedule, loss_spec: LossSpec,
               algo: str = "gradient", seed: int = 0, latency_model: LatencyModel | None = None,
               reward_spec: RewardSpec | None = None, reinforce_state: ReinforceState | None = None,
               mode: str = "binary") -> SearchReport:
    """Alternate weight epochs and architecture passes; returns the final state and metrics."""
    schedule.validate()
    if algo not in ("gradient", "reinforce"):
        raise ScheduleError(f"unknown algorithm {algo!r}")
    if mode == "one-shot":
        raise ScheduleError("one-shot mode has no architecture weights to learn; use darts or binary")
    if algo == "reinforce" and mode != "binary":
        raise ScheduleError("reinforce updates need binary gates (mode 'binary')")
    if mode not in ("darts", "binary"):
        raise ScheduleError(f"unknown mixed-op mode {mode!r}")
    if loss_spec.active and latency_model is None:
        raise ScheduleError("latency model required when the latency term is enabled")
    if algo == "reinforce":
        reward_spec = reward_spec or RewardSpec(kind="acc-only")
        if reward_spec.kind == "acc-latency" and latency_model is None:
            raise ScheduleError("latency model required for an acc-latency reward")
        reinforce_state = reinforce_state or ReinforceState()
    _searchable_or_fail(net)
    net.set_cache_policy(schedule.cache_policy)

    gate_rng = stream(seed, "gates")
    data_rng = stream(seed, "data")
    train_batches = batch_stream(train, schedule.batch_size, data_rng)
    val_batches = batch_stream(val, schedule.arch_batch_size or schedule.batch_size, stream(seed, "val"))
    steps_per_round = schedule.weight_steps or -(-len(train) // schedule.batch_size)
    total_steps = steps_per_round * schedule.epochs

    opt = SGD(net.parameters(), schedule.weight_lr, schedule.momentum, loss_spec.lambda1)
    arch_lr = schedule.arch_lr if schedule.arch_lr is not None else (0.006 if algo == "gradient" else 0.01)
    adam = MaskedAdam([len(e) for e in net.edges], arch_lr)

    lats = op_latencies(net, latency_model) if latency_model is not None else None
    fixed = fixed_latency(net, latency_model) if latency_model is not None else 0.0
    grad_lats = lats if loss_spec.active else None

    rows: list[dict] = []
    best = -1.0

    def record(epoch: int, phase: str, loss: float) -> float:
        acc = evaluate_derived(net, val)
        searchable = [e for e in net.edges if len(e) >= 2]
        rows.append({
            "epoch": epoch,
            "phase": phase,
            "loss": float(loss),
            "val_acc": float(acc),
            "expected_latency_ms": expected_net_latency(net, latency_model) if latency_model is not None else None,
            "mean_edge_entropy": float(np.mean([entropy(e.probs) for e in searchable])),
        })
        return acc

    step = 0
    for epoch in range(schedule.epochs):
        losses = []
        for _ in range(steps_per_round):
            lr = cosine_lr(schedule.weight_lr, step, total_steps)
            losses.append(weight_step(net, next(train_batches), opt, gate_rng, lr, mode))
            step += 1
        best = max(best, record(epoch, "weight", float(np.mean(losses))))

        arch_losses = []
        for _ in range(schedule.arch_steps):
            if algo == "reinforce":
                batch = (val.x, val.y) if reinforce_state.full_validation else next(val_batches)
                arch_losses.append(reinforce_arch_step(net, batch, reward_spec, reinforce_state, adam, gate_rng, lats, fixed))
            elif mode == "darts":
                arch_losses.append(darts_arch_step(net, next(val_batches), adam, grad_lats, loss_spec.lambda2))
            elif schedule.arch_update == "full":
                arch_losses.append(full_arch_step(net, next(val_batches), adam, gate_rng, schedule.cache_policy,
                                                  grad_lats, loss_spec.lambda2))
            else:
                arch_losses.append(two_path_arch_step(net, next(val_batches), adam, gate_rng, schedule.cache_policy,
                                                      grad_lats, loss_spec.lambda2))
        # for reinforce the arch-phase "loss" column holds the mean sampled reward
        best = max(best, record(epoch, "arch", float(np.mean(arch_losses))))
        log.debug("epoch %d: %s", epoch, rows[-1])

    return SearchReport(
        alphas=[e.alpha.tolist() for e in net.edges],
        probs=[e.probs.tolist() for e in net.edges],
        chosen=argmax_choices(net),
        metrics=rows,
        final_val_acc=rows[-1]["val_acc"],
        best_val_acc=best,
        expected_latency_ms=expected_net_latency(net, latency_model) if latency_model is not None else None,
    )
