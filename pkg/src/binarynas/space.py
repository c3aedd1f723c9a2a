"""Over-parameterized supernets: candidate catalogs, mixed edges and block chains.

A search space is described by a JSON document::

    {
      "ops": "mobile" | "cifar7" | [{"kind": "sep_conv", "kernel": 3}, ...],
      "input_shape": [C, H, W],
      "num_classes": K,
      "channels": {"stem": 8, "final": 16, "stem_kernel": 3},
      "stages": [{"blocks": 2, "channels": 8, "stride": 2}, ...],
      "skippable": true | false | [block indices],
      "residual": true
    }

Each stage contributes ``blocks`` mixed edges (``B``); only the first block of
a stage applies ``stride``.  ``channels.final`` (``F``) is the width of the
1x1 conv in the classifier head (0 disables it).  A block whose input and
output shapes agree is a residual position; with ``residual`` on its output is
``x + m(x)``, and if it is ``skippable`` the zero op joins its candidates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Affine, Conv2d, Dense, Module, ReLU, Sequential
from .tensor import ShapeError, Tensor

MODES = ("one-shot", "darts", "binary")

KINDS = (
    "sep_conv",
    "dil_sep_conv",
    "conv",
    "mbconv",
    "avg_pool",
    "max_pool",
    "identity",
    "zero",
    "random_proj",
)

CATALOGS = {
    "cifar7": [
        {"kind": "dil_sep_conv", "kernel": 3},
        {"kind": "identity"},
        {"kind": "sep_conv", "kernel": 3},
        {"kind": "sep_conv", "kernel": 5},
        {"kind": "sep_conv", "kernel": 7},
        {"kind": "avg_pool", "kernel": 3},
        {"kind": "max_pool", "kernel": 3},
    ],
    "mobile": [
        {"kind": "mbconv", "kernel": k, "expand": e} for k in (3, 5, 7) for e in (3, 6)
    ],
}


class SpaceError(ValueError):
    pass


class GatesNotSampled(RuntimeError):
    def __init__(self):
        super().__init__("gates not sampled")


@dataclass(frozen=True)
class CandidateOp:
    kind: str
    in_ch: int
    out_ch: int
    kernel: int = 0
    expand: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpaceError(f"unknown op kind {self.kind!r}")
        if self.kind in ("identity", "zero") and (self.stride != 1 or self.in_ch != self.out_ch):
            raise SpaceError(
                f"{self.kind} op needs matching input/output shapes "
                f"(got {self.in_ch}->{self.out_ch} channels, stride {self.stride})"
            )
        if self.kind in ("sep_conv", "dil_sep_conv", "conv", "mbconv") and self.kernel not in (1, 3, 5, 7):
            raise SpaceError(f"{self.kind}: kernel must be one of 1/3/5/7, got {self.kernel}")
        if self.kind == "mbconv" and self.expand < 1:
            raise SpaceError(f"mbconv: expansion ratio must be >= 1, got {self.expand}")

    @property
    def label(self) -> str:
        if self.kind == "mbconv":
            return f"mbconv{self.kernel}x{self.kernel}_e{self.expand}"
        if self.kernel:
            return f"{self.kind}{self.kernel}x{self.kernel}"
        return self.kind

    def build(self, rng: np.random.Generator) -> Module:
        return _build_op(self, rng)


class Zero(Module):
    def forward(self, x):
        return T.zeros_like(x)


class Identity(Module):
    def forward(self, x):
        return T.identity(x)


class Pool(Module):
    def __init__(self, kind, stride, proj=None):
        super().__init__()
        self.kind, self.stride, self.proj = kind, stride, proj

    def forward(self, x):
        pool = T.avg_pool2d if self.kind == "avg_pool" else T.max_pool2d
        y = pool(x, self.stride)
        return self.proj(y) if self.proj is not None else y


class RandomProjection(Module):
    """A frozen random 1x1 convolution."""

    def __init__(self, in_ch, out_ch, stride, rng):
        super().__init__()
        self.stride = stride
        self.weight = Tensor(rng.standard_normal((out_ch, in_ch, 1, 1)) / np.sqrt(in_ch))

    def forward(self, x):
        return T.conv2d(x, self.weight, self.stride)


def _build_op(op: CandidateOp, rng: np.random.Generator) -> Module:
    k, s, cin, cout = op.kernel, op.stride, op.in_ch, op.out_ch
    if op.kind in ("sep_conv", "dil_sep_conv"):
        d = 2 if op.kind == "dil_sep_conv" else 1
        return Sequential(
            Conv2d(cin, cin, k, rng, stride=s, dilation=d, depthwise=True),
            Conv2d(cin, cout, 1, rng),
            Affine(cout),
            ReLU(),
        )
    if op.kind == "conv":
        return Sequential(Conv2d(cin, cout, k, rng, stride=s), Affine(cout), ReLU())
    if op.kind == "mbconv":
        mid = cin * op.expand
        return Sequential(
            Conv2d(cin, mid, 1, rng),
            Affine(mid),
            ReLU(),
            Conv2d(mid, mid, k, rng, stride=s, depthwise=True),
            Affine(mid),
            ReLU(),
            Conv2d(mid, cout, 1, rng),
            Affine(cout),
        )
    if op.kind in ("avg_pool", "max_pool"):
        proj = Sequential(Conv2d(cin, cout, 1, rng), Affine(cout)) if cin != cout else None
        return Pool(op.kind, s, proj)
    if op.kind == "identity":
        return Identity()
    if op.kind == "zero":
        return Zero()
    return RandomProjection(cin, cout, s, rng)


class MemoryMeter:
    """Counts live candidate-output buffers held by an edge."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def reset(self):
        self.live = 0
        self.peak = 0

    def alloc(self, n: int = 1):
        self.live += n
        self.peak = max(self.peak, self.live)

    def free(self, n: int = 1):
        self.live -= n


@dataclass
class GateSample:
    """A sampled binary gate: the active index and the paths involved in the update."""

    active: int
    support: tuple[int, ...]
    weights: np.ndarray | None = None


class MixedEdge(Module):
    """One searchable edge with ``N`` parallel candidate paths."""

    def __init__(self, ops: Sequence[CandidateOp], rng: np.random.Generator, name: str = "edge"):
        super().__init__()
        if not ops:
            raise SpaceError(f"{name}: empty candidate list")
        self.name = name
        self.ops = list(ops)
        self.candidates = [op.build(rng) for op in self.ops]
        self.alpha = np.zeros(len(self.ops))
        self.sample: GateSample | None = None
        self.cache_policy = "recompute"
        self.meter = MemoryMeter()
        self.last_input: Tensor | None = None
        self.last_output: Tensor | None = None
        self.cached_outputs: dict[int, np.ndarray] = {}
        self._alpha_node: Tensor | None = None

    def __len__(self) -> int:
        return len(self.ops)

    @property
    def probs(self) -> np.ndarray:
        return T._softmax(self.alpha)

    @property
    def gates(self) -> np.ndarray:
        g = np.zeros(len(self.ops))
        if self.sample is not None:
            g[self.sample.active] = 1.0
        return g

    def set_gate(self, active: int, support: Sequence[int] | None = None, weights=None):
        support = tuple(support) if support is not None else (active,)
        if active not in support:
            raise ValueError(f"{self.name}: active path {active} not in support {support}")
        self.sample = GateSample(active, support, weights)

    def named_parameters(self, prefix: str = ""):
        for i, c in enumerate(self.candidates):
            yield from c.named_parameters(f"{prefix}candidates.{i}.")

    def forward(self, x: Tensor, mode: str = "binary") -> Tensor:
        self.meter.reset()
        self.cached_outputs = {}
        self.last_input = x
        if mode == "binary":
            if self.sample is None:
                raise GatesNotSampled()
            k = self.sample.active
            y = self.candidates[k](x)
            self.meter.alloc()
            if self.cache_policy == "cached":
                with T.no_grad():
                    for j in self.sample.support:
                        if j != k:
                            self.cached_outputs[j] = self.candidates[j](x).data
                            self.meter.alloc()
            y = T.identity(y)
            if T.grad_enabled() and not y.requires_grad:
                y.requires_grad = True
            self.last_output = y
            return y
        if mode not in ("darts", "one-shot"):
            raise ValueError(f"unknown mixed-op mode {mode!r}")
        outs = []
        for c in self.candidates:
            outs.append(c(x))
            self.meter.alloc()
        if mode == "darts":
            self._alpha_node = Tensor(self.alpha, requires_grad=True)
            w = T.softmax(self._alpha_node)
        else:
            self._alpha_node = None
            w = Tensor(np.ones(len(outs)))
        y = T.weighted_sum(outs, w)
        self.last_output = y
        return y

    def __call__(self, x: Tensor, mode: str = "binary") -> Tensor:
        self.calls += 1
        return self.forward(x, mode)

    @property
    def alpha_grad(self) -> np.ndarray | None:
        """d(loss)/d(alpha) from the last darts-mode backward."""
        if self._alpha_node is None or self._alpha_node.grad is None:
            return None
        return self._alpha_node.grad


@dataclass
class BlockInfo:
    index: int
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]
    residual: bool


class Block(Module):
    def __init__(self, edge: MixedEdge, info: BlockInfo):
        super().__init__()
        self.edge = edge
        self.info = info

    def forward(self, x, mode="binary"):
        y = self.edge(x, mode)
        return T.add(x, y) if self.info.residual else y

    def __call__(self, x, mode="binary"):
        self.calls += 1
        return self.forward(x, mode)


class Head(Module):
    """Optional 1x1 conv to ``final`` channels, global average pool, classifier."""

    def __init__(self, in_ch, final, num_classes, rng):
        super().__init__()
        self.in_ch, self.final = in_ch, final
        self.proj = Sequential(Conv2d(in_ch, final, 1, rng), Affine(final), ReLU()) if final else None
        self.classifier = Dense(final or in_ch, num_classes, rng)

    def forward(self, x):
        if self.proj is not None:
            x = self.proj(x)
        return self.classifier(T.global_avg_pool(x))


def make_stem(in_ch, stem_ch, kernel, rng) -> Module:
    return Sequential(Conv2d(in_ch, stem_ch, kernel, rng), Affine(stem_ch), ReLU())


@dataclass
class SearchSpaceSpec:
    ops: str | list
    input_shape: tuple[int, int, int]
    num_classes: int
    stem_channels: int
    stages: list[dict]
    final_channels: int = 0
    stem_kernel: int = 3
    skippable: bool | list[int] = False
    residual: bool = True
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchSpaceSpec":
        try:
            channels = doc.get("channels", {})
            spec = cls(
                ops=doc["ops"],
                input_shape=tuple(int(v) for v in doc["input_shape"]),
                num_classes=int(doc["num_classes"]),
                stem_channels=int(channels["stem"]),
                final_channels=int(channels.get("final", 0)),
                stem_kernel=int(channels.get("stem_kernel", 3)),
                stages=[dict(s) for s in doc.get("stages", [])],
                skippable=doc.get("skippable", False),
                residual=bool(doc.get("residual", True)),
                raw=dict(doc),
            )
        except KeyError as exc:
            raise SpaceError(f"search space: missing key {exc.args[0]!r}") from None
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "SearchSpaceSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "ops": self.ops,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "channels": {"stem": self.stem_channels, "final": self.final_channels, "stem_kernel": self.stem_kernel},
            "stages": [dict(s) for s in self.stages],
            "skippable": self.skippable,
            "residual": self.residual,
        }

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpaceError(f"input_shape must be [C, H, W], got {list(self.input_shape)}")
        if isinstance(self.ops, str) and self.ops not in CATALOGS:
            raise SpaceError(f"unknown op catalog {self.ops!r}")
        for i, st in enumerate(self.stages):
            if int(st.get("blocks", 0)) < 0 or int(st.get("channels", 1)) < 1:
                raise SpaceError(f"stage {i}: blocks must be >= 0 and channels >= 1")
            if int(st.get("stride", 1)) not in (1, 2):
                raise SpaceError(f"stage {i}: stride must be 1 or 2")
        self.layout()

    def catalog(self) -> list[dict]:
        return CATALOGS[self.ops] if isinstance(self.ops, str) else list(self.ops)

    def layout(self) -> list[tuple[BlockInfo, list[CandidateOp]]]:
        """Resolve every block's shapes and candidate list."""
        c, h, w = self.input_shape
        shape = (self.stem_channels, h, w)
        blocks = []
        idx = 0
        for st in self.stages:
            for b in range(int(st["blocks"])):
                stride = int(st.get("stride", 1)) if b == 0 else 1
                out_c = int(st["channels"])
                out_shape = (out_c, -(-shape[1] // stride), -(-shape[2] // stride))
                same = stride == 1 and out_c == shape[0]
                info = BlockInfo(idx, shape, out_shape, residual=same and self.residual)
                blocks.append((info, self._candidates(info, stride)))
                shape = out_shape
                idx += 1
        if isinstance(self.skippable, list):
            for i in self.skippable:
                if not 0 <= i < len(blocks):
                    raise SpaceError(f"skippable block {i} does not exist")
        return blocks

    def _skippable(self, info: BlockInfo) -> bool:
        # ``true`` admits the zero op at every residual position; an explicit
        # list must only name residual positions.
        if isinstance(self.skippable, list):
            return info.index in self.skippable
        return bool(self.skippable) and info.residual

    def _candidates(self, info: BlockInfo, stride: int) -> list[CandidateOp]:
        ops = []
        for entry in self.catalog():
            kind = entry["kind"]
            if (kind == "zero" and not info.residual) or (kind == "identity" and info.in_shape != info.out_shape):
                raise SpaceError(
                    f"block {info.index}: {kind} op is only admissible at residual positions "
                    f"(in {info.in_shape}, out {info.out_shape})"
                )
            ops.append(
                CandidateOp(
                    kind,
                    info.in_shape[0],
                    info.out_shape[0],
                    kernel=int(entry.get("kernel", 3 if kind.endswith("pool") else 0)),
                    expand=int(entry.get("expand", 1)),
                    stride=stride,
                )
            )
        if self._skippable(info) and not any(o.kind == "zero" for o in ops):
            if not info.residual:
                raise SpaceError(
                    f"block {info.index}: cannot be skipped, input {info.in_shape} "
                    f"and output {info.out_shape} differ or residual connections are off"
                )
            ops.append(CandidateOp("zero", info.in_shape[0], info.out_shape[0]))
        return ops


def count_decisions(spec: SearchSpaceSpec | dict | None) -> int:
    """Number of searchable edges (blocks offering at least two candidates)."""
    if spec is None:
        return 0
    if isinstance(spec, dict):
        if not spec.get("stages"):
            return 0
        spec = SearchSpaceSpec.from_dict(spec)
    return sum(1 for _, ops in spec.layout() if len(ops) >= 2)


class ChainNet(Module):
    """stem -> blocks -> head, where each block is any module or a mixed edge."""

    def __init__(self, input_shape, stem: Module, blocks: list, head: Head):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.stem = stem
        self.blocks = blocks
        self.head = head

    def check_input(self, x: Tensor) -> None:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError("network input", ("N",) + self.input_shape, x.shape)

    def forward(self, x, mode="binary"):
        self.check_input(x)
        x = self.stem(x)
        for b in self.blocks:
            x = b(x, mode) if isinstance(b, Block) else b(x)
        return self.head(x)

    def __call__(self, x, mode="binary"):
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.calls += 1
        return self.forward(x, mode)


class CompactBlock(Module):
    def __init__(self, op: Module, residual: bool):
        super().__init__()
        self.op = op
        self.residual = residual

    def forward(self, x):
        y = self.op(x)
        return T.add(x, y) if self.residual else y


class SuperNet(ChainNet):
    def __init__(self, spec: SearchSpaceSpec, rng: np.random.Generator):
        layout = spec.layout()
        c_in = spec.input_shape[0]
        stem = make_stem(c_in, spec.stem_channels, spec.stem_kernel, rng)
        blocks = [Block(MixedEdge(ops, rng, name=f"block{info.index}"), info) for info, ops in layout]
        last_c = layout[-1][0].out_shape[0] if layout else spec.stem_channels
        head = Head(last_c, spec.final_channels, spec.num_classes, rng)
        super().__init__(spec.input_shape, stem, blocks, head)
        self.spec = spec

    @property
    def edges(self) -> list[MixedEdge]:
        return [b.edge for b in self.blocks]

    @property
    def searchable(self) -> list[MixedEdge]:
        return [e for e in self.edges if len(e) >= 2]

    def weight_parameters(self) -> list[Tensor]:
        return self.parameters()

    def set_cache_policy(self, policy: str) -> None:
        if policy not in ("cached", "recompute"):
            raise ValueError(f"unknown cache policy {policy!r}")
        for e in self.edges:
            e.cache_policy = policy

    def compact(self, choices: Sequence[int]) -> ChainNet:
        """The sub-network picked by ``choices``, sharing this supernet's weights."""
        if len(choices) != len(self.blocks):
            raise ValueError(f"need {len(self.blocks)} choices, got {len(choices)}")
        kept = []
        for b, k in zip(self.blocks, choices):
            if b.edge.ops[k].kind == "zero":
                continue
            kept.append(CompactBlock(b.edge.candidates[k], b.info.residual))
        return ChainNet(self.input_shape, self.stem, kept, self.head)

    def shapes(self) -> list[BlockInfo]:
        return [b.info for b in self.blocks]


def build_supernet(spec: SearchSpaceSpec | dict, rng: np.random.Generator) -> SuperNet:
    if isinstance(spec, dict):
        spec = SearchSpaceSpec.from_dict(spec)
    return SuperNet(spec, rng)


def mixed_forward(edge: MixedEdge, x: Tensor, mode: str) -> Tensor:
    if mode not in MODES:
        raise ValueError(f"unknown mixed-op mode {mode!r}")
    return edge(x, mode)
