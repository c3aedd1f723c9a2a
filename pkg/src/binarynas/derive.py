"""Compact-architecture derivation, architecture files, checkpoints and retraining.

Architecture file (JSON)::

    {
      "schema_version": 1,
      "input_shape": [C, H, W],
      "num_classes": K,
      "stem": {"channels": 8, "kernel": 3},
      "head": {"final": 16},
      "blocks": [{"kind": "mbconv", "kernel": 5, "stride": 1, "expand": 3,
                  "channels": 8, "in_channels": 8, "residual": true}, ...],
      "provenance": {"config_hash": "...", "seed": 0, "alpha": [[...], ...]}
    }

``in_channels`` and ``residual`` may be omitted; they are inferred from the
chain.  Unknown keys are ignored.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .latency import LatencyModel, OpLatencyFeatures
from .nn import Module
from .optim import SGD, cosine_lr
from .search import TrainSchedule, batch_stream, evaluate, stream, train_step, weight_step
from .space import CandidateOp, ChainNet, CompactBlock, Head, SearchSpaceSpec, SuperNet, make_stem

SCHEMA_VERSION = 1
WEIGHTS_MAGIC = b"SFW1"
WEIGHTS_VERSION = 1


class ArchFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    channels: int
    kernel: int = 0
    stride: int = 1
    expand: int = 1
    residual: bool = False

    def op(self) -> CandidateOp:
        return CandidateOp(self.kind, self.in_channels, self.channels, self.kernel, self.expand, self.stride)


@dataclass
class DerivedArch:
    input_shape: tuple[int, int, int]
    num_classes: int
    stem_channels: int
    blocks: list[BlockSpec]
    stem_kernel: int = 3
    final_channels: int = 0
    provenance: dict = field(default_factory=dict)

    def shapes(self) -> list[tuple[tuple[int, int, int], tuple[int, int, int]]]:
        _, h, w = self.input_shape
        shape = (self.stem_channels, h, w)
        out = []
        for b in self.blocks:
            nxt = (b.channels, -(-shape[1] // b.stride), -(-shape[2] // b.stride))
            out.append((shape, nxt))
            shape = nxt
        return out

    def validate(self) -> None:
        c = self.stem_channels
        for i, b in enumerate(self.blocks):
            if b.in_channels != c:
                raise ArchFormatError(f"block {i}: in_channels {b.in_channels} but previous block emits {c}")
            try:
                b.op()
            except ValueError as exc:
                raise ArchFormatError(f"block {i}: {exc}") from None
            if b.residual and (b.stride != 1 or b.in_channels != b.channels):
                raise ArchFormatError(f"block {i}: residual block must keep its input shape")
            c = b.channels

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "stem": {"channels": self.stem_channels, "kernel": self.stem_kernel},
            "head": {"final": self.final_channels},
            "blocks": [
                {"kind": b.kind, "kernel": b.kernel, "stride": b.stride, "expand": b.expand,
                 "channels": b.channels, "in_channels": b.in_channels, "residual": b.residual}
                for b in self.blocks
            ],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc) -> "DerivedArch":
        if not isinstance(doc, dict):
            raise ArchFormatError("architecture document must be a JSON object")
        version = doc.get("schema_version")
        if version is None:
            raise ArchFormatError("missing schema_version")
        if version != SCHEMA_VERSION:
            raise ArchFormatError(f"unsupported schema_version {version!r} (this build reads {SCHEMA_VERSION})")
        try:
            input_shape = tuple(int(v) for v in doc["input_shape"])
            stem = doc["stem"]
            stem_channels = int(stem["channels"])
            blocks = []
            c = stem_channels
            for i, b in enumerate(doc["blocks"]):
                out_c = int(b["channels"])
                stride = int(b.get("stride", 1))
                in_c = int(b.get("in_channels", c))
                residual = bool(b.get("residual", stride == 1 and in_c == out_c))
                blocks.append(BlockSpec(str(b["kind"]), in_c, out_c, int(b.get("kernel", 0)), stride,
                                        int(b.get("expand", 1)), residual))
                c = out_c
            arch = cls(
                input_shape=input_shape,
                num_classes=int(doc["num_classes"]),
                stem_channels=stem_channels,
                blocks=blocks,
                stem_kernel=int(stem.get("kernel", 3)),
                final_channels=int(doc.get("head", {}).get("final", 0)),
                provenance=dict(doc.get("provenance", {})),
            )
        except KeyError as exc:
            raise ArchFormatError(f"missing required key {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ArchFormatError):
                raise
            raise ArchFormatError(f"schema violation: {exc}") from None
        if len(arch.input_shape) != 3:
            raise ArchFormatError(f"input_shape must have 3 entries, got {list(arch.input_shape)}")
        arch.validate()
        return arch


def export_arch(arch: DerivedArch, path) -> None:
    Path(path).write_text(json.dumps(arch.to_dict(), indent=2) + "\n")


def parse_arch(raw: bytes) -> DerivedArch:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ArchFormatError("architecture file is not UTF-8", exc.start) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArchFormatError(f"malformed architecture JSON: {exc.msg}", len(text[: exc.pos].encode())) from None
    return DerivedArch.from_dict(doc)


def import_arch(path) -> DerivedArch:
    return parse_arch(Path(path).read_bytes())


def config_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def derive(net: SuperNet, provenance: dict | None = None) -> DerivedArch:
    """Keep the highest-weight path per edge (lowest index on ties); zero winners drop the block."""
    spec = net.spec
    blocks = []
    for b in net.blocks:
        k = int(np.argmax(b.edge.alpha))
        op = b.edge.ops[k]
        if op.kind == "zero":
            continue
        blocks.append(BlockSpec(op.kind, op.in_ch, op.out_ch, op.kernel, op.stride, op.expand, b.info.residual))
    prov = {"alpha": [e.alpha.tolist() for e in net.edges]}
    prov.update(provenance or {})
    return DerivedArch(spec.input_shape, spec.num_classes, spec.stem_channels, blocks,
                       spec.stem_kernel, spec.final_channels, prov)


def build_compact(arch: DerivedArch, rng: np.random.Generator) -> ChainNet:
    """Fresh weights; initialization order matches a supernet with one candidate per edge."""
    arch.validate()
    stem = make_stem(arch.input_shape[0], arch.stem_channels, arch.stem_kernel, rng)
    blocks: list[Module] = [CompactBlock(b.op().build(rng), b.residual) for b in arch.blocks]
    last_c = arch.blocks[-1].channels if arch.blocks else arch.stem_channels
    head = Head(last_c, arch.final_channels, arch.num_classes, rng)
    return ChainNet(arch.input_shape, stem, blocks, head)


def arch_features(arch: DerivedArch):
    c, h, w = arch.input_shape
    stem = OpLatencyFeatures("stem", h, w, c, h, w, arch.stem_channels, arch.stem_kernel, 1, 1)
    blocks = [OpLatencyFeatures.of(b.op(), i, o) for b, (i, o) in zip(arch.blocks, arch.shapes())]
    last_c, lh, lw = arch.shapes()[-1][1] if arch.blocks else (arch.stem_channels, h, w)
    head = OpLatencyFeatures("head", lh, lw, last_c, 1, 1, arch.final_channels or arch.num_classes, 1, 1, 1)
    return stem, head, blocks


def predict_latency(arch: DerivedArch, model: LatencyModel) -> float:
    stem, head, blocks = arch_features(arch)
    return model.predict(stem) + model.predict(head) + sum(model.predict(f) for f in blocks)


def train_weights(net, train: Dataset, schedule: TrainSchedule, seed: int, lambda1: float = 0.0,
                  mode: str = "binary") -> list[float]:
    """Plain weight training, one pass per epoch; returns per-step losses.

    A :class:`SuperNet` gets its gates resampled every step; any other
    network is trained as is.
    """
    schedule.validate(need_arch=False)
    data_rng = stream(seed, "data")
    gate_rng = stream(seed, "gates")
    batches = batch_stream(train, schedule.batch_size, data_rng)
    steps = schedule.weight_steps or -(-len(train) // schedule.batch_size)
    total = steps * schedule.epochs
    opt = SGD(net.parameters(), schedule.weight_lr, schedule.momentum, lambda1)
    losses = []
    for step in range(total):
        lr = cosine_lr(schedule.weight_lr, step, total)
        if isinstance(net, SuperNet):
            losses.append(weight_step(net, next(batches), opt, gate_rng, lr, mode))
        else:
            losses.append(train_step(net, next(batches), opt, lr))
    return losses


@dataclass
class CompactResult:
    model: ChainNet
    val_acc: float
    losses: list[float]
    predicted_latency_ms: float | None


def train_compact(arch: DerivedArch, train: Dataset, val: Dataset, schedule: TrainSchedule, seed: int,
                  latency_model: LatencyModel | None = None, lambda1: float = 0.0) -> CompactResult:
    model = build_compact(arch, stream(seed, "weights"))
    losses = train_weights(model, train, schedule, seed, lambda1)
    _, acc = evaluate(model, val)
    lat = predict_latency(arch, latency_model) if latency_model is not None else None
    return CompactResult(model, acc, losses, lat)


# ---------------------------------------------------------------------------
# checkpoints


def save_weights(net: Module, path) -> None:
    """Binary blob: magic, version, index length, JSON index, float64 payload."""
    named = list(net.named_parameters())
    index = json.dumps([{"name": n, "shape": list(p.shape)} for n, p in named]).encode()
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for _, p in named)
    header = WEIGHTS_MAGIC + struct.pack("<II", WEIGHTS_VERSION, len(index))
    Path(path).write_bytes(header + index + payload)


def load_weights(net: Module, path) -> None:
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHTS_MAGIC:
        raise ArchFormatError(f"{path}: not a weight file", 0)
    if len(raw) < 12:
        raise ArchFormatError(f"{path}: truncated header", len(raw))
    version, n = struct.unpack_from("<II", raw, 4)
    if version != WEIGHTS_VERSION:
        raise ArchFormatError(f"{path}: unsupported weight file version {version}")
    try:
        index = json.loads(raw[12 : 12 + n])
    except json.JSONDecodeError as exc:
        raise ArchFormatError(f"{path}: corrupt index", 12 + exc.pos) from None
    params = dict(net.named_parameters())
    offset = 12 + n
    for entry in index:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(raw):
            raise ArchFormatError(f"{path}: payload truncated", len(raw))
        p = params.get(entry["name"])
        if p is None or p.shape != shape:
            raise ArchFormatError(f"{path}: parameter {entry['name']} {shape} does not match the network")
        p.data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count


def save_checkpoint(net: SuperNet, out_dir, seed: int, config: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "space": net.spec.to_dict(),
        "alpha": [e.alpha.tolist() for e in net.edges],
        "chosen": [int(np.argmax(e.alpha)) for e in net.edges],
        "seed": seed,
        "config_hash": config_hash(config) if config is not None else None,
        "weights": "weights.bin",
    }
    path = out_dir / "checkpoint.json"
    path.write_text(json.dumps(doc, indent=1) + "\n")
    save_weights(net, out_dir / "weights.bin")
    return path


def load_checkpoint(path, with_weights: bool = False) -> SuperNet:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    raw = path.read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ArchFormatError(f"{path}: malformed checkpoint", exc.pos) from None
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ArchFormatError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    net = SuperNet(SearchSpaceSpec.from_dict(doc["space"]), np.random.default_rng(0))
    if len(doc["alpha"]) != len(net.edges):
        raise ArchFormatError(f"{path}: {len(doc['alpha'])} alpha vectors for {len(net.edges)} edges")
    for e, a in zip(net.edges, doc["alpha"]):
        e.alpha = np.array(a, dtype=np.float64)
    net.provenance = {"seed": doc.get("seed"), "config_hash": doc.get("config_hash")}
    if with_weights:
        load_weights(net, path.parent / doc.get("weights", "weights.bin"))
    return net
