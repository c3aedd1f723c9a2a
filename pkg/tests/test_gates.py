import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from binarynas import tensor as T
from binarynas.derive import BlockSpec, DerivedArch, build_compact, train_weights
from binarynas.gates import (
    GateGradError,
    gate_grads,
    rescale_pair,
    sample_gates,
    sample_pair,
    sample_two_path,
    softmax,
    softmax_jacobian_vec,
)
from binarynas.optim import SGD, MaskedAdam
from binarynas.search import (
    LossSpec,
    ScheduleError,
    TrainSchedule,
    full_arch_step,
    run_search,
    stream,
    two_path_arch_step,
    weight_step,
)
from binarynas.space import CandidateOp, GateSample, MixedEdge, SearchSpaceSpec, SuperNet

from toys import DOMINANT_OPS, EQUIVALENT_OPS, mean_sign_data, toy_data, toy_spec, two_op_table


def _freqs(p, draws=10_000, seed=0):
    rng = np.random.default_rng(seed)
    counts = np.bincount([sample_gates(p, rng).active for _ in range(draws)], minlength=len(p))
    return counts / draws


def test_uniform_pair_frequencies():
    f = _freqs(softmax([0.0, 0.0]))
    assert np.all((f >= 0.48) & (f <= 0.52))


def test_ln3_frequencies():
    p = softmax([np.log(3.0), 0.0])
    np.testing.assert_allclose(p, [0.75, 0.25], atol=1e-15)
    np.testing.assert_allclose(_freqs(p), p, atol=0.02)


def test_single_path_always_zero():
    rng = np.random.default_rng(0)
    assert all(sample_gates(np.array([1.0]), rng).active == 0 for _ in range(100))


@pytest.mark.parametrize("seed", range(5))
def test_gate_frequencies_pass_chi_square(seed):
    rng = np.random.default_rng(100 + seed)
    p = softmax(rng.standard_normal(6))
    counts = _freqs(p, seed=seed) * 10_000
    assert stats.chisquare(counts, 10_000 * p).pvalue > 0.01


def test_pair_sampled_without_replacement():
    rng = np.random.default_rng(0)
    p = softmax([2.0, 0.0, -1.0, 0.5])
    pairs = [sample_pair(p, rng) for _ in range(20_000)]
    assert all(a != b for a, b in pairs)
    first = np.bincount([a for a, _ in pairs], minlength=4) / len(pairs)
    np.testing.assert_allclose(first, p, atol=0.015)
    # P(pair = {0, 1}) = p0 p1 / (1 - p0) + p1 p0 / (1 - p1)
    both = np.mean([{a, b} == {0, 1} for a, b in pairs])
    assert abs(both - (p[0] * p[1] / (1 - p[0]) + p[1] * p[0] / (1 - p[1]))) < 0.015


def test_two_path_active_in_pair():
    edge = MixedEdge([CandidateOp("identity", 2, 2)] * 5, np.random.default_rng(0))
    edge.alpha = np.array([0.3, -1.0, 2.0, 0.0, 0.7])
    rng = np.random.default_rng(1)
    for _ in range(200):
        s = sample_two_path(edge, rng)
        assert s.active in s.support and len(set(s.support)) == 2
        np.testing.assert_allclose(s.weights, softmax(edge.alpha[list(s.support)]), rtol=0, atol=1e-15)


# ---------------------------------------------------------------------------
# softmax Jacobian-vector product


def test_jvp_examples():
    np.testing.assert_allclose(softmax_jacobian_vec([0.5, 0.5], [1.0, 0.0]), [0.25, -0.25])
    p = softmax([0.1, -0.4, 1.3])
    np.testing.assert_allclose(softmax_jacobian_vec(p, [2.5, 2.5, 2.5]), 0.0, atol=1e-15)
    with pytest.raises(ValueError):
        softmax_jacobian_vec([0.5, 0.5], [1.0, 0.0, 0.0])


def jvp_fd_error(rng, n):
    alpha = rng.standard_normal(n)
    v = rng.standard_normal(n)
    h = 1e-6
    fd = np.array([(softmax(alpha + h * e) @ v - softmax(alpha - h * e) @ v) / (2 * h) for e in np.eye(n)])
    an = softmax_jacobian_vec(softmax(alpha), v)
    return float(np.max(np.abs(an - fd)) / max(np.max(np.abs(fd)), 1e-12))


@pytest.mark.parametrize("n", [2, 3, 8])
def test_jvp_matches_finite_differences(n):
    rng = np.random.default_rng(n)
    assert max(jvp_fd_error(rng, n) for _ in range(100)) < 1e-6


# ---------------------------------------------------------------------------
# gate gradients


def _edge_ops(n, c=3):
    kinds = [CandidateOp("sep_conv", c, c, 3), CandidateOp("avg_pool", c, c, 3), CandidateOp("max_pool", c, c, 3),
             CandidateOp("sep_conv", c, c, 5), CandidateOp("mbconv", c, c, 3, 3), CandidateOp("identity", c, c),
             CandidateOp("dil_sep_conv", c, c, 3), CandidateOp("random_proj", c, c)]
    return [kinds[i % len(kinds)] for i in range(n)]


def gate_grad_pair(rng, n, support=None):
    """dL/dg under both policies for one edge and one random upstream gradient."""
    edge = MixedEdge(_edge_ops(n), rng)
    x = T.Tensor(rng.standard_normal((2, 3, 5, 5)))
    u = rng.standard_normal((2, 3, 5, 5))
    support = tuple(range(n)) if support is None else support
    active = support[int(rng.integers(len(support)))]
    out = {}
    for policy in ("cached", "recompute"):
        edge.cache_policy = policy
        edge.sample = GateSample(active, support, None)
        y = edge(x, "binary")
        T.backward(T.sum_all(T.mul(y, T.Tensor(u))))
        out[policy] = gate_grads(edge, policy=policy)
        out[policy + "_peak"] = edge.meter.peak
    return edge, x, u, out


def test_gate_grads_match_definition():
    rng = np.random.default_rng(0)
    edge, x, u, out = gate_grad_pair(rng, 5)
    with T.no_grad():
        expected = [np.sum(u * c(x).data) for c in edge.candidates]
    np.testing.assert_allclose(out["recompute"], expected, rtol=1e-12, atol=1e-12)
    k = edge.sample.active
    assert out["recompute"][k] == np.sum(u * edge.last_output.data)


def test_gate_grads_equal_gradient_of_gated_sum():
    # y = sum_j g_j o_j(x) with g one-hot; differentiate the gates directly
    rng = np.random.default_rng(4)
    edge, x, u, out = gate_grad_pair(rng, 4)
    g = T.Tensor(edge.gates, requires_grad=True)
    y = T.weighted_sum([c(x) for c in edge.candidates], g)
    (dg,) = T.grad(T.sum_all(T.mul(y, T.Tensor(u))), [g])
    np.testing.assert_allclose(out["cached"], dg, rtol=1e-12, atol=1e-12)


def test_zero_path_gate_grad_is_zero():
    edge = MixedEdge([CandidateOp("identity", 2, 2), CandidateOp("zero", 2, 2)], np.random.default_rng(0))
    edge.sample = GateSample(0, (0, 1))
    y = edge(T.Tensor(np.ones((1, 2, 3, 3))))
    T.backward(T.sum_all(y))
    assert gate_grads(edge)[1] == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_cached_and_recompute_policies_agree(seed):
    rng = np.random.default_rng(seed)
    _, _, _, out = gate_grad_pair(rng, int(rng.integers(2, 9)))
    np.testing.assert_allclose(out["cached"], out["recompute"], rtol=0, atol=1e-12)


@pytest.mark.parametrize("n", [2, 4, 8, 16])
def test_recompute_live_buffers_bounded(n):
    _, _, _, out = gate_grad_pair(np.random.default_rng(n), n)
    assert out["recompute_peak"] <= 2  # active path + one recomputed path
    assert out["cached_peak"] == n


def test_recompute_without_cached_input_raises():
    edge = MixedEdge(_edge_ops(2), np.random.default_rng(0))
    edge.sample = GateSample(0, (0, 1))
    y = edge(T.Tensor(np.ones((1, 3, 4, 4))))
    T.backward(T.sum_all(y))
    edge.last_input = None
    with pytest.raises(GateGradError, match="not cached"):
        gate_grads(edge, policy="recompute")


# ---------------------------------------------------------------------------
# rescaling


def test_rescale_example():
    alpha = rescale_pair([0.5, -0.2, 0.0], 0, 1, 0.0, 0.0)
    r = 2.0 / (np.exp(0.5) + np.exp(-0.2))
    assert abs(r - 0.81055) < 5e-6
    np.testing.assert_allclose(alpha[:2], np.array([0.5, -0.2]) + np.log(r), rtol=0, atol=1e-15)
    assert abs(softmax(alpha)[2] - 1 / 3) <= 1e-12


def test_rescale_noop():
    alpha = np.array([0.3, -1.2, 0.8])
    np.testing.assert_array_equal(rescale_pair(alpha, 2, 0, 0.8, 0.3), alpha)


def rescale_case(rng):
    n = int(rng.integers(3, 10))
    alpha = rng.normal(0, 3, n)
    a, b = rng.choice(n, 2, replace=False)
    new = alpha.copy()
    new[[a, b]] += rng.normal(0, 0.5, 2)
    out = rescale_pair(new, a, b, alpha[a], alpha[b])
    others = [i for i in range(n) if i not in (a, b)]
    weight_err = np.max(np.abs(softmax(out)[others] - softmax(alpha)[others]))
    pair_err = abs(np.logaddexp(out[a], out[b]) - np.logaddexp(alpha[a], alpha[b]))
    order = (out[a] > out[b]) == (new[a] > new[b])
    return weight_err, pair_err, order


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rescale_preserves_unsampled_weights(seed):
    weight_err, pair_err, order = rescale_case(np.random.default_rng(seed))
    assert weight_err <= 1e-12 and pair_err <= 1e-12 and order


def test_rescale_handles_large_alphas():
    out = rescale_pair([800.0, 805.0, 790.0], 0, 1, 801.0, 803.0)
    assert np.all(np.isfinite(out))
    assert abs(np.logaddexp(out[0], out[1]) - np.logaddexp(801.0, 803.0)) < 1e-9


# ---------------------------------------------------------------------------
# two-path step


def _cifar_net(seed, blocks=2):
    spec = SearchSpaceSpec.from_dict({
        "ops": "cifar7", "input_shape": [1, 6, 6], "num_classes": 2,
        "channels": {"stem": 3, "final": 4}, "stages": [{"blocks": blocks, "channels": 3}],
    })
    return SuperNet(spec, np.random.default_rng(seed))


def test_two_path_step_leaves_unsampled_weights():
    net = _cifar_net(0)
    train, val = toy_data(0, 60)
    rng = np.random.default_rng(0)
    for e in net.edges:
        e.alpha = rng.standard_normal(len(e))
    adam = MaskedAdam([len(e) for e in net.edges], 0.05)
    for _ in range(10):
        before = [e.probs for e in net.edges]
        two_path_arch_step(net, (val.x, val.y), adam, rng)
        for e, p in zip(net.edges, before):
            rest = [i for i in range(len(e)) if i not in e.sample.support]
            np.testing.assert_allclose(e.probs[rest], p[rest], rtol=0, atol=1e-12)
            a, b = e.sample.support
            assert np.sign(e.probs[a] - p[a]) == -np.sign(e.probs[b] - p[b])


def _identity_vs_skip_net():
    """Residual block where the identity path raises the correct logit and skipping does not."""
    spec = SearchSpaceSpec.from_dict({
        "ops": [{"kind": "identity"}], "input_shape": [1, 4, 4], "num_classes": 2,
        "channels": {"stem": 2, "stem_kernel": 1}, "stages": [{"blocks": 1, "channels": 2}], "skippable": True,
    })
    net = SuperNet(spec, np.random.default_rng(0))
    for p in net.stem.parameters():
        if p.data.ndim == 4:
            p.data = np.ones_like(p.data)
    dense = [p for p in net.head.parameters() if p.data.ndim == 2][0]
    dense.data = np.array([[1.0, 1.0], [-1.0, -1.0]])
    x = np.abs(np.random.default_rng(1).standard_normal((8, 1, 4, 4))) + 0.1
    return net, (x, np.zeros(8, dtype=np.int64))


def test_two_path_sign_on_constructed_loss():
    net, batch = _identity_vs_skip_net()
    edge = net.edges[0]
    assert [o.kind for o in edge.ops] == ["identity", "zero"]
    losses = []
    for k in (0, 1):
        edge.set_gate(k)
        with T.no_grad():
            losses.append(T.cross_entropy(net(batch[0]), batch[1]).item())
    assert losses[0] < losses[1]
    adam = MaskedAdam([2], 0.006)
    for seed in range(5):
        edge.alpha = np.zeros(2)
        two_path_arch_step(net, batch, adam, np.random.default_rng(seed))
        assert edge.probs[0] > 0.5 > edge.probs[1]


class FixedRng:
    """Stand-in generator whose ``random()`` replays fixed values."""

    def __init__(self, values):
        self.values = list(values)

    def random(self):
        return self.values.pop(0)


def test_two_path_equals_full_update_for_two_ops():
    train, val = toy_data(3, 80)
    batch = (val.x, val.y)
    nets = [SuperNet(toy_spec(DOMINANT_OPS), np.random.default_rng(7)) for _ in range(2)]
    for net in nets:
        net.edges[0].alpha = np.array([0.4, -0.1])
    p = nets[0].edges[0].probs
    adams = [MaskedAdam([2], 0.006), MaskedAdam([2], 0.006)]
    for _ in range(5):
        # pair (1, 0) with path 1 active; the full step draws the same active path
        two_path_arch_step(nets[0], batch, adams[0], FixedRng([0.99, 0.0, 0.0]))
        full_arch_step(nets[1], batch, adams[1], FixedRng([0.99]))
        np.testing.assert_allclose(nets[0].edges[0].probs, nets[1].edges[0].probs, rtol=0, atol=1e-12)
    assert not np.allclose(nets[0].edges[0].probs, p)


def test_two_path_rejects_single_candidate_space():
    net = SuperNet(toy_spec([{"kind": "sep_conv", "kernel": 3}]), np.random.default_rng(0))
    with pytest.raises(ScheduleError):
        two_path_arch_step(net, (np.zeros((2, 1, 6, 6)), np.zeros(2, int)), MaskedAdam([1], 0.1),
                           np.random.default_rng(0))


# ---------------------------------------------------------------------------
# weight step


def test_weight_step_leaves_inactive_weights_untouched():
    net = _cifar_net(1, blocks=1)
    train, _ = toy_data(1, 64)
    opt = SGD(net.parameters(), 0.05)
    rng = np.random.default_rng(0)
    for _ in range(6):
        before = {n: p.data.copy() for n, p in net.named_parameters()}
        weight_step(net, (train.x[:16], train.y[:16]), opt, rng, 0.05)
        k = net.edges[0].sample.active
        for name, p in net.named_parameters():
            if name.startswith("blocks.0.edge.candidates.") and not name.startswith(f"blocks.0.edge.candidates.{k}."):
                assert np.array_equal(p.data, before[name]), name


def test_weight_step_rejects_empty_batch():
    net = _cifar_net(0, blocks=1)
    with pytest.raises(ValueError, match="empty"):
        weight_step(net, (np.zeros((0, 1, 6, 6)), np.zeros(0, int)), SGD(net.parameters(), 0.1),
                    np.random.default_rng(0), 0.1)


def test_single_op_supernet_trains_like_compact_model():
    spec = toy_spec([{"kind": "sep_conv", "kernel": 3}])
    arch = DerivedArch((1, 6, 6), 2, 4, [BlockSpec("sep_conv", 4, 4, 3)], stem_kernel=1, final_channels=8)
    train, _ = toy_data(2, 96)
    sched = TrainSchedule(epochs=3, batch_size=16)
    a = train_weights(SuperNet(spec, stream(2, "weights")), train, sched, seed=2)
    b = train_weights(build_compact(arch, stream(2, "weights")), train, sched, seed=2)
    assert a == b


def test_weight_loss_decreases_on_separable_toy():
    net = SuperNet(toy_spec(EQUIVALENT_OPS), stream(0, "weights"))
    losses = train_weights(net, mean_sign_data(0), TrainSchedule(epochs=8, batch_size=32), seed=0)[:50]
    smoothed = np.convolve(losses, np.ones(10) / 10, mode="valid")[::10]
    assert np.all(np.diff(smoothed) < 0), smoothed


# ---------------------------------------------------------------------------
# driver contracts


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(arch_steps=0), dict(weight_steps=0)])
def test_run_search_rejects_zero_steps(bad):
    net = SuperNet(toy_spec(DOMINANT_OPS), np.random.default_rng(0))
    train, val = toy_data(0, 40)
    with pytest.raises(ScheduleError):
        run_search(net, train, val, TrainSchedule(**bad), LossSpec())


def _short_search(seed, **kw):
    net = SuperNet(toy_spec(DOMINANT_OPS), stream(seed, "weights"))
    train, val = toy_data(seed, 120)
    return run_search(net, train, val, TrainSchedule(epochs=3, batch_size=16, arch_steps=4), seed=seed, **kw)


def test_disabled_latency_term_changes_nothing():
    plain = _short_search(4, loss_spec=LossSpec())
    net = SuperNet(toy_spec(DOMINANT_OPS), np.random.default_rng(0))
    table = two_op_table(net, [20.0, 10.0])
    zero = _short_search(4, loss_spec=LossSpec(lambda2=0.0, latency=True), latency_model=table)
    off = _short_search(4, loss_spec=LossSpec(lambda2=5.0, latency=False), latency_model=table)
    assert zero.alphas == plain.alphas == off.alphas
    assert zero.expected_latency_ms is not None and plain.expected_latency_ms is None


def test_search_is_deterministic():
    a = _short_search(5, loss_spec=LossSpec())
    b = _short_search(5, loss_spec=LossSpec())
    assert a.metrics_csv() == b.metrics_csv() and a.alphas == b.alphas


def test_metrics_have_expected_columns():
    rep = _short_search(6, loss_spec=LossSpec())
    head, *rows = rep.metrics_csv().splitlines()
    assert head == "epoch,phase,loss,val_acc,expected_latency_ms,mean_edge_entropy"
    assert [r.split(",")[1] for r in rows] == ["weight", "arch"] * 3


def test_darts_mode_search_runs():
    rep = _short_search(7, loss_spec=LossSpec(), mode="darts")
    assert len(rep.metrics) == 6 and all(np.isfinite(rep.alphas[0]))
