"""Latency prediction and expected-latency terms.

Per-op latency comes either from a lookup table keyed on the op's feature
vector or from a linear regressor over those features.  Expected latency of a
mixed edge is linear in its path weights, so its derivative with respect to
``p_j`` is just the op's predicted latency.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .gates import softmax_jacobian_vec
from .space import CandidateOp, SuperNet

CSV_COLUMNS = ("op_kind", "in_h", "in_w", "in_c", "out_h", "out_w", "out_c", "kernel", "stride", "expand", "latency_ms")
NUMERIC = ("in_h", "in_w", "in_c", "out_h", "out_w", "out_c", "kernel", "stride", "expand")
DEVICE_PROFILES = ("gpu-like", "cpu-like", "mobile-like")


class LatencyError(ValueError):
    pass


@dataclass(frozen=True)
class OpLatencyFeatures:
    kind: str
    in_h: int
    in_w: int
    in_c: int
    out_h: int
    out_w: int
    out_c: int
    kernel: int = 0
    stride: int = 1
    expand: int = 1

    def __post_init__(self):
        dims = (self.in_h, self.in_w, self.in_c, self.out_h, self.out_w, self.out_c, self.stride, self.expand)
        if min(dims) < 1 or self.kernel < 0:
            raise LatencyError(f"non-positive dimension in features {self}")

    @property
    def key(self) -> tuple:
        return (self.kind,) + tuple(getattr(self, n) for n in NUMERIC)

    def numeric(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in NUMERIC], dtype=np.float64)

    @classmethod
    def of(cls, op: CandidateOp, in_shape, out_shape) -> "OpLatencyFeatures":
        c, h, w = in_shape
        oc, oh, ow = out_shape
        return cls(op.kind, h, w, c, oh, ow, oc, op.kernel, op.stride, op.expand)


@dataclass(frozen=True)
class LatencySample:
    features: OpLatencyFeatures
    ms: float

    def __post_init__(self):
        if not self.ms >= 0:
            raise LatencyError(f"measured latency must be >= 0, got {self.ms}")


@dataclass
class FitReport:
    mode: str
    n_train: int
    n_holdout: int
    rmse_train: float
    rmse_holdout: float
    correlation: float
    coef_stderr: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


class LatencyModel:
    """Maps op features to milliseconds.  Zero ops always cost 0 ms."""

    def __init__(self, mode: str = "table", table: dict | None = None, kinds: Sequence[str] = (),
                 columns: Sequence[str] = NUMERIC, coef=None, intercept: float = 0.0):
        if mode not in ("table", "linear"):
            raise LatencyError(f"unknown latency model mode {mode!r}")
        self.mode = mode
        self.table = dict(table or {})
        self.kinds = list(kinds)
        self.columns = list(columns)
        self.coef = np.asarray(coef if coef is not None else np.zeros(len(self.kinds[1:]) + len(self.columns)), dtype=np.float64)
        self.intercept = float(intercept)

    def design_row(self, f: OpLatencyFeatures) -> np.ndarray:
        if f.kind not in self.kinds:
            raise LatencyError(f"latency model has no coefficient for op kind {f.kind!r}")
        onehot = np.array([1.0 if f.kind == k else 0.0 for k in self.kinds[1:]])
        num = np.array([getattr(f, c) for c in self.columns], dtype=np.float64)
        return np.concatenate([onehot, num])

    def predict(self, f: OpLatencyFeatures) -> float:
        if f.kind == "zero":
            return 0.0
        if self.mode == "table":
            try:
                return self.table[f.key]
            except KeyError:
                raise LatencyError(f"no latency entry for op {f.kind} with key {f.key}") from None
        return max(0.0, self.intercept + float(self.design_row(f) @ self.coef))

    def scaled(self, c: float) -> "LatencyModel":
        return LatencyModel(self.mode, {k: v * c for k, v in self.table.items()}, self.kinds,
                            self.columns, self.coef * c, self.intercept * c)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "table": [list(k) + [v] for k, v in sorted(self.table.items())],
            "kinds": self.kinds,
            "columns": self.columns,
            "coef": self.coef.tolist(),
            "intercept": self.intercept,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LatencyModel":
        table = {tuple([r[0]] + [int(v) for v in r[1:-1]]): float(r[-1]) for r in doc.get("table", [])}
        return cls(doc["mode"], table, doc.get("kinds", []), doc.get("columns", NUMERIC),
                   doc.get("coef"), doc.get("intercept", 0.0))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "LatencyModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def table_model(samples: Iterable[LatencySample]) -> LatencyModel:
    """Exact lookup table; repeated keys are averaged."""
    sums: dict[tuple, list[float]] = {}
    for s in samples:
        sums.setdefault(s.features.key, []).append(s.ms)
    return LatencyModel("table", {k: float(np.mean(v)) for k, v in sums.items()})


def _usable_columns(feats: Sequence[OpLatencyFeatures]) -> list[str]:
    """Drop constant columns and columns identical to an earlier one."""
    X = np.array([f.numeric() for f in feats])
    keep: list[int] = []
    for j in range(X.shape[1]):
        col = X[:, j]
        if np.all(col == col[0]):
            continue
        if any(np.array_equal(col, X[:, i]) for i in keep):
            continue
        keep.append(j)
    return [NUMERIC[j] for j in keep]


def _split(n: int, holdout: float, rng: np.random.Generator | None):
    idx = np.arange(n) if rng is None else rng.permutation(n)
    n_hold = int(round(n * holdout))
    if n_hold >= n:
        n_hold = n - 1
    return idx[n_hold:], idx[:n_hold]


def _rmse(pred, y) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(y)) ** 2))) if len(y) else float("nan")


def _corr(pred, y) -> float:
    if len(y) < 2 or np.std(pred) == 0 or np.std(y) == 0:
        return float("nan")
    return float(np.corrcoef(pred, y)[0, 1])


def fit_latency_model(samples: Sequence[LatencySample], holdout: float = 0.2, mode: str = "linear",
                      rng: np.random.Generator | None = None) -> tuple[LatencyModel, FitReport]:
    """Fit on a random ``1 - holdout`` share of ``samples`` and report holdout error.

    Zero-op samples are excluded from the fit; the model pins them to 0 ms.
    """
    samples = [s for s in samples if s.features.kind != "zero"]
    if len({s.features.key for s in samples}) < 2 and mode == "linear":
        mode = "table"
    if not samples:
        raise LatencyError("no non-zero samples to fit")
    if not 0.0 <= holdout < 1.0:
        raise LatencyError(f"holdout fraction must be in [0, 1), got {holdout}")
    train_idx, hold_idx = _split(len(samples), holdout, rng)
    train = [samples[i] for i in train_idx]
    hold = [samples[i] for i in hold_idx]
    notes: list[str] = []
    stderr: list[float] = []

    if mode == "linear":
        feats = [s.features for s in train]
        kinds = sorted({f.kind for f in feats})
        columns = _usable_columns(feats)
        model = LatencyModel("linear", kinds=kinds, columns=columns)
        X = np.array([model.design_row(f) for f in feats])
        X1 = np.hstack([np.ones((len(X), 1)), X])
        y = np.array([s.ms for s in train])
        rank = np.linalg.matrix_rank(X1)
        if rank < X1.shape[1] or len(y) <= X1.shape[1]:
            msg = f"design matrix rank {rank} < {X1.shape[1]} columns; falling back to per-key table"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)
            mode = "table"
        else:
            beta, *_ = np.linalg.lstsq(X1, y, rcond=None)
            resid = y - X1 @ beta
            sigma2 = float(resid @ resid) / (len(y) - X1.shape[1])
            cov = sigma2 * np.linalg.inv(X1.T @ X1)
            stderr = np.sqrt(np.diag(cov)).tolist()
            model.intercept = float(beta[0])
            model.coef = beta[1:]
    if mode == "table":
        model = table_model(train)

    def predict_known(s):
        try:
            return model.predict(s.features)
        except LatencyError:
            return np.nan

    pred_tr = np.array([model.predict(s.features) for s in train])
    y_tr = np.array([s.ms for s in train])
    pred_ho = np.array([predict_known(s) for s in hold])
    y_ho = np.array([s.ms for s in hold])
    known = ~np.isnan(pred_ho) if len(hold) else np.zeros(0, bool)
    if len(hold) and not known.all():
        notes.append(f"{int((~known).sum())} holdout keys missing from table")
    report = FitReport(
        mode=mode,
        n_train=len(train),
        n_holdout=len(hold),
        rmse_train=_rmse(pred_tr, y_tr),
        rmse_holdout=_rmse(pred_ho[known], y_ho[known]) if len(hold) else float("nan"),
        correlation=_corr(pred_ho[known], y_ho[known]) if len(hold) else float("nan"),
        coef_stderr=stderr,
        warnings=notes,
    )
    return model, report


# ---------------------------------------------------------------------------
# CSV tables


def read_table_csv(path) -> list[LatencySample]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise LatencyError(f"{path}: missing columns {missing}")
        for line, row in enumerate(reader, start=2):
            try:
                f = OpLatencyFeatures(row["op_kind"], *(int(row[c]) for c in NUMERIC))
                out.append(LatencySample(f, float(row["latency_ms"])))
            except (ValueError, LatencyError) as exc:
                raise LatencyError(f"{path}:{line}: {exc}") from None
    return out


def write_table_csv(path, samples: Iterable[LatencySample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for s in samples:
            w.writerow(list(s.features.key) + [repr(float(s.ms))])


# ---------------------------------------------------------------------------
# synthetic device profiles


def macs(f: OpLatencyFeatures) -> float:
    """Rough multiply-accumulate count of one op at batch size 1."""
    out_px = f.out_h * f.out_w
    k2 = f.kernel * f.kernel
    if f.kind == "mbconv":
        mid = f.in_c * f.expand
        return f.in_h * f.in_w * f.in_c * mid + out_px * mid * k2 + out_px * mid * f.out_c
    if f.kind in ("sep_conv", "dil_sep_conv"):
        return out_px * f.in_c * k2 + out_px * f.in_c * f.out_c
    if f.kind in ("conv", "stem"):
        return out_px * f.in_c * f.out_c * k2
    if f.kind in ("avg_pool", "max_pool"):
        return out_px * f.in_c * 9 + (out_px * f.in_c * f.out_c if f.in_c != f.out_c else 0)
    if f.kind == "head":
        return f.in_h * f.in_w * f.in_c * f.out_c
    if f.kind == "random_proj":
        return out_px * f.in_c * f.out_c
    return f.in_h * f.in_w * f.in_c


def profile_latency(f: OpLatencyFeatures, profile: str) -> float:
    """Deterministic latency of ``f`` on a synthetic device (milliseconds)."""
    if f.kind == "zero":
        return 0.0
    m = macs(f)
    act = f.out_h * f.out_w * f.out_c
    if profile == "cpu-like":
        return 0.02 + 2e-5 * m + 1e-5 * act
    if profile == "gpu-like":
        # launch overhead dominates; wide kernels are nearly free
        layers = 3 if f.kind == "mbconv" else 2 if "sep_conv" in f.kind else 1
        return 0.05 * layers + 2e-6 * m + 4e-6 * act
    if profile == "mobile-like":
        return 0.03 + 1e-5 * m + 2e-5 * act
    raise LatencyError(f"unknown device profile {profile!r}; expected one of {DEVICE_PROFILES}")


def net_features(net: SuperNet) -> tuple[OpLatencyFeatures, OpLatencyFeatures, list[list[OpLatencyFeatures]]]:
    """(stem, head, per-block candidate features) for a supernet."""
    spec = net.spec
    c, h, w = spec.input_shape
    stem = OpLatencyFeatures("stem", h, w, c, h, w, spec.stem_channels, spec.stem_kernel, 1, 1)
    blocks = [[OpLatencyFeatures.of(op, b.info.in_shape, b.info.out_shape) for op in b.edge.ops] for b in net.blocks]
    last_c, lh, lw = net.blocks[-1].info.out_shape if net.blocks else (spec.stem_channels, h, w)
    head = OpLatencyFeatures("head", lh, lw, last_c, 1, 1, spec.final_channels or spec.num_classes, 1, 1, 1)
    return stem, head, blocks


def profile_table(net: SuperNet, profile: str) -> LatencyModel:
    """A table model covering every op of ``net`` on a synthetic device."""
    stem, head, blocks = net_features(net)
    feats = [stem, head] + [f for fs in blocks for f in fs]
    return table_model(LatencySample(f, profile_latency(f, profile)) for f in feats)


def synthetic_samples(n: int, rng: np.random.Generator, noise_ms: float = 0.5,
                      kinds: Sequence[str] = ("mbconv", "sep_conv", "conv", "avg_pool", "max_pool"),
                      truth: dict | None = None) -> tuple[list[LatencySample], dict]:
    """Samples from a known linear latency law plus Gaussian noise.

    Returns the samples and the ground-truth parameters (intercept, per-kind
    offsets, per-feature coefficients).
    """
    if truth is None:
        truth = {
            "intercept": 2.0,
            "kind_offset": {k: float(i) * 1.5 for i, k in enumerate(sorted(kinds))},
            "coef": dict(zip(NUMERIC, (0.08, 0.05, 0.04, 0.06, 0.03, 0.05, 0.4, 1.2, 0.7))),
        }
    out = []
    for _ in range(n):
        kind = kinds[rng.integers(len(kinds))]
        stride = int(rng.choice([1, 2]))
        in_h, in_w = int(rng.integers(4, 65)), int(rng.integers(4, 65))
        f = OpLatencyFeatures(
            kind, in_h, in_w, int(rng.integers(4, 97)),
            -(-in_h // stride), -(-in_w // stride), int(rng.integers(4, 97)),
            int(rng.choice([3, 5, 7])), stride, int(rng.choice([3, 6])) if kind == "mbconv" else 1,
        )
        ms = truth["intercept"] + truth["kind_offset"][kind] + float(f.numeric() @ np.array([truth["coef"][c] for c in NUMERIC]))
        out.append(LatencySample(f, max(0.0, ms + noise_ms * rng.standard_normal())))
    return out, truth


# ---------------------------------------------------------------------------
# expected latency


def op_latencies(net: SuperNet, model: LatencyModel) -> list[np.ndarray]:
    """F(o_j) for every candidate of every block; also d E[latency_i] / d p_j."""
    _, _, blocks = net_features(net)
    return [np.array([model.predict(f) for f in fs]) for fs in blocks]


def expected_edge_latency(probs: np.ndarray, latencies: np.ndarray) -> float:
    """``sum_j p_j * F(o_j)``; its gradient with respect to ``p`` is ``latencies``."""
    probs = np.asarray(probs, dtype=np.float64)
    latencies = np.asarray(latencies, dtype=np.float64)
    if probs.shape != latencies.shape:
        raise LatencyError(f"{len(probs)} path weights but {len(latencies)} latencies")
    return float(probs @ latencies)


def fixed_latency(net: SuperNet, model: LatencyModel) -> float:
    stem, head, _ = net_features(net)
    return model.predict(stem) + model.predict(head)


def expected_net_latency(net: SuperNet, model: LatencyModel) -> float:
    total = fixed_latency(net, model)
    for edge, lat in zip(net.edges, op_latencies(net, model)):
        total += expected_edge_latency(edge.probs, lat)
    return total


@dataclass
class LatencyTerm:
    value: float
    alpha_grads: list[np.ndarray]


def latency_loss(net: SuperNet, model: LatencyModel, lambda2: float) -> LatencyTerm:
    """``lambda2 * E[latency]`` and its gradient with respect to every edge's alpha."""
    if lambda2 < 0:
        raise LatencyError(f"lambda2 must be >= 0, got {lambda2}")
    lats = op_latencies(net, model)
    value = 0.0
    grads = []
    for edge, lat in zip(net.edges, lats):
        p = edge.probs
        value += expected_edge_latency(p, lat)
        grads.append(lambda2 * softmax_jacobian_vec(p, lat))
    # stem/head carry no architecture parameters
    value += fixed_latency(net, model)
    return LatencyTerm(lambda2 * value, grads)


def load_latency_model(table_csv=None, model_json=None, profile=None, net=None) -> LatencyModel | None:
    """Resolve a latency model from the places a run config may point to."""
    if model_json is not None:
        return LatencyModel.load(model_json)
    if table_csv is not None:
        return table_model(read_table_csv(table_csv))
    if profile is not None:
        if net is None:
            raise LatencyError("a device profile needs the network to enumerate its ops")
        return profile_table(net, profile)
    return None
