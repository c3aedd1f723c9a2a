import json

import numpy as np
import pytest

from binarynas.data import separable_patches, split
from binarynas.derive import (
    ArchFormatError,
    BlockSpec,
    DerivedArch,
    derive,
    export_arch,
    import_arch,
    load_checkpoint,
    load_weights,
    parse_arch,
    predict_latency,
    save_checkpoint,
    save_weights,
    train_compact,
    train_weights,
)
from binarynas.latency import expected_net_latency, profile_table
from binarynas.search import TrainSchedule, stream
from binarynas.space import SearchSpaceSpec, SuperNet

from toys import toy_spec

KINDS = [("sep_conv", (3, 5, 7)), ("dil_sep_conv", (3, 5)), ("mbconv", (3, 5, 7)), ("avg_pool", (3,)),
         ("max_pool", (3,)), ("conv", (1, 3)), ("random_proj", (0,))]


def random_arch(rng) -> DerivedArch:
    c = int(rng.integers(1, 9))
    stem = c
    blocks = []
    for _ in range(int(rng.integers(0, 7))):
        kind, kernels = KINDS[rng.integers(len(KINDS))]
        stride = int(rng.choice([1, 2]))
        out_c = c if rng.random() < 0.5 else int(rng.integers(1, 9))
        if rng.random() < 0.2 and stride == 1 and out_c == c:
            kind, kernels = "identity", (0,)
        expand = int(rng.choice([3, 6])) if kind == "mbconv" else 1
        residual = stride == 1 and out_c == c and bool(rng.random() < 0.7)
        blocks.append(BlockSpec(kind, c, out_c, int(rng.choice(kernels)), stride, expand, residual))
        c = out_c
    prov = {"seed": int(rng.integers(1000)), "config_hash": f"{rng.integers(1 << 32):08x}",
            "alpha": [rng.standard_normal(int(rng.integers(1, 5))).tolist() for _ in blocks]}
    return DerivedArch((int(rng.integers(1, 4)), int(rng.integers(4, 33)), int(rng.integers(4, 33))),
                       int(rng.integers(2, 11)), stem, blocks, int(rng.choice([1, 3, 5])), int(rng.integers(0, 17)), prov)


def three_op_net(seed=0):
    spec = SearchSpaceSpec.from_dict({
        "ops": [{"kind": "sep_conv", "kernel": 3}, {"kind": "max_pool"}, {"kind": "mbconv", "kernel": 3, "expand": 3}],
        "input_shape": [1, 6, 6], "num_classes": 2,
        "channels": {"stem": 4, "final": 8}, "stages": [{"blocks": 2, "channels": 4}],
        "skippable": True,
    })
    return SuperNet(spec, np.random.default_rng(seed))


def test_argmax_and_ties():
    net = three_op_net()
    net.edges[0].alpha = np.array([0.1, 0.9, 0.3, -1.0])
    net.edges[1].alpha = np.array([0.4, 0.4, 0.1, 0.4])
    arch = derive(net)
    assert [b.kind for b in arch.blocks] == ["max_pool", "sep_conv"]
    assert arch.provenance["alpha"][0] == [0.1, 0.9, 0.3, -1.0]


def test_zero_winner_removes_block():
    net = three_op_net()
    net.edges[0].alpha = np.array([0.0, 0.0, 0.0, 2.0])
    arch = derive(net)
    assert arch.depth == 1 and len(net.blocks) == 2
    assert arch.blocks[0].residual


def test_derive_invariant_to_monotone_alpha_maps():
    net = three_op_net()
    rng = np.random.default_rng(0)
    for _ in range(20):
        alphas = [rng.standard_normal(len(e)) for e in net.edges]
        for e, a in zip(net.edges, alphas):
            e.alpha = a
        ref = derive(net).blocks
        for f in (lambda a: 3 * a + 7, np.exp, lambda a: a ** 3, lambda a: a + 100.0):
            for e, a in zip(net.edges, alphas):
                e.alpha = f(a)
            assert derive(net).blocks == ref


def test_derive_ignores_weights():
    net = three_op_net()
    net.edges[0].alpha = np.array([0.2, -0.1, 0.7, 0.0])
    before = derive(net).blocks
    for p in net.parameters():
        p.data = p.data + np.random.default_rng(1).standard_normal(p.shape)
    assert derive(net).blocks == before


def test_round_trip_random_architectures(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        arch = random_arch(rng)
        arch.validate()
        path = tmp_path / f"a{i}.json"
        export_arch(arch, path)
        assert import_arch(path) == arch


def test_truncated_file_reports_byte_offset(tmp_path):
    arch = random_arch(np.random.default_rng(3))
    raw = json.dumps(arch.to_dict()).encode()
    cut = raw[: len(raw) // 2]
    with pytest.raises(ArchFormatError) as info:
        parse_arch(cut)
    assert info.value.offset is not None and 0 < info.value.offset <= len(cut)
    assert "byte offset" in str(info.value)


def test_minimal_hand_written_arch():
    arch = parse_arch(b'{"schema_version": 1, "input_shape": [1, 6, 6], "num_classes": 2,'
                      b' "stem": {"channels": 4},'
                      b' "blocks": [{"kind": "sep_conv", "kernel": 3, "channels": 4}], "comment": "ignored"}')
    assert arch.depth == 1
    b = arch.blocks[0]
    assert (b.kind, b.in_channels, b.channels, b.stride, b.residual) == ("sep_conv", 4, 4, 1, True)


@pytest.mark.parametrize("doc, message", [
    ({"schema_version": 2}, "schema_version"),
    ({"input_shape": [1, 6, 6]}, "schema_version"),
    ({"schema_version": 1, "input_shape": [1, 6, 6], "num_classes": 2, "stem": {"channels": 4}}, "blocks"),
    ({"schema_version": 1, "input_shape": [1, 6, 6], "num_classes": 2, "stem": {"channels": 4},
      "blocks": [{"kind": "sep_conv", "kernel": 3, "channels": 4, "in_channels": 3}]}, "in_channels"),
    ({"schema_version": 1, "input_shape": [1, 6, 6], "num_classes": 2, "stem": {"channels": 4},
      "blocks": [{"kind": "max_pool", "channels": 8, "residual": True}]}, "residual"),
    ({"schema_version": 1, "input_shape": [1, 6, 6], "num_classes": 2, "stem": {"channels": 4},
      "blocks": [{"kind": "warp_drive", "channels": 4}]}, "warp_drive"),
    ([1, 2], "object"),
])
def test_schema_errors(doc, message):
    with pytest.raises(ArchFormatError, match=message):
        parse_arch(json.dumps(doc).encode())


def test_one_op_compact_trains_like_supernet():
    spec = toy_spec([{"kind": "sep_conv", "kernel": 3}])
    net = SuperNet(spec, stream(1, "weights"))
    arch = derive(net)
    train, val = split(separable_patches(96, stream(1, "data")), 0.25, stream(1, "split"))
    sched = TrainSchedule(epochs=2, batch_size=16)
    assert train_compact(arch, train, val, sched, seed=1).losses == train_weights(net, train, sched, seed=1)


def test_derived_toy_arch_reaches_95_percent():
    net = SuperNet(toy_spec([{"kind": "sep_conv", "kernel": 3}, {"kind": "random_proj"}]), np.random.default_rng(0))
    net.edges[0].alpha = np.array([1.2, -0.4])
    arch = derive(net)
    train, val = split(separable_patches(400, stream(0, "data")), 0.25, stream(0, "split"))
    result = train_compact(arch, train, val, TrainSchedule(epochs=15, batch_size=32), seed=0)
    assert result.val_acc >= 0.95


def test_predicted_latency_not_above_expected_when_argmax_is_cheapest():
    net = three_op_net()
    model = profile_table(net, "cpu-like")
    # make max_pool the argmax: it is also the cheapest non-zero op under the cpu-like profile
    for e in net.edges:
        e.alpha = np.array([0.0, 1.5, 0.3, -2.0])
    arch = derive(net)
    assert [b.kind for b in arch.blocks] == ["max_pool", "max_pool"]
    assert predict_latency(arch, model) <= expected_net_latency(net, model)


def test_checkpoint_round_trip(tmp_path):
    net = three_op_net(4)
    net.edges[1].alpha = np.array([0.3, -0.2, 1.1, 0.0])
    save_checkpoint(net, tmp_path, seed=4, config={"a": 1})
    again = load_checkpoint(tmp_path, with_weights=True)
    assert derive(again).blocks == derive(net).blocks
    assert again.provenance["seed"] == 4 and again.provenance["config_hash"]
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), again.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)


def test_weight_file_errors(tmp_path):
    net = three_op_net()
    path = tmp_path / "w.bin"
    save_weights(net, path)
    raw = path.read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(ArchFormatError, match="truncated"):
        load_weights(three_op_net(), tmp_path / "t.bin")
    (tmp_path / "m.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ArchFormatError, match="not a weight file"):
        load_weights(three_op_net(), tmp_path / "m.bin")
    (tmp_path / "v.bin").write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(ArchFormatError, match="version 7"):
        load_weights(three_op_net(), tmp_path / "v.bin")
