import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tndnas import tensor as T
from tndnas.searchspace import (
    CELL_TYPES,
    EDGES,
    NORMAL_OPS,
    REDUCTION_OPS,
    AlphaTable,
    CellSpec,
    Genotype,
    GenotypeFormatError,
    InvalidGenotypeError,
    NetworkConfig,
    SuperNetwork,
    backbone_parameter_count,
    build_supernetwork,
    count_parameters,
    derive_genotype,
    full_candidates,
    op_param_count,
    shrink_opset,
    supernetwork_parameter_count,
    to_dot,
)


def small_net(layers=5, channels=4, seed=0, num_classes=3):
    return build_supernetwork(CellSpec(), layers, channels, NORMAL_OPS, REDUCTION_OPS, seed, num_classes=num_classes)


def random_genotype(rng, candidates, edges=EDGES):
    return Genotype(
        *(
            {e: names[rng.integers(len(names))] for e, names in zip(edges, candidates[ct])}
            for ct in CELL_TYPES
        )
    )


def one_hot_probs(genotype, candidates, edges=EDGES):
    probs = {}
    for ct in CELL_TYPES:
        probs[ct] = []
        for e, names in zip(edges, candidates[ct]):
            p = np.zeros(len(names))
            p[names.index(genotype.op(ct, e))] = 1.0
            probs[ct].append(p)
    return probs


def standalone_copy(net, genotype):
    """Independent network holding only the chosen op per edge, weights copied by name."""
    single = {
        ct: [(genotype.op(ct, e),) for e in net.edges] for ct in CELL_TYPES
    }
    sub = SuperNetwork(net.config, single, seed=net.seed + 999)
    src = dict(net.named_parameters())
    for name, p in sub.named_parameters():
        p.data[...] = src[name].data
    return sub


# ------------------------------------------------------------ construction


def test_catalog_sizes():
    assert len(NORMAL_OPS) == 10 and len(REDUCTION_OPS) == 6


def test_fourteen_edges():
    assert len(EDGES) == 14
    assert all(i < j for i, j in EDGES)


def test_reduction_positions_for_five_layers():
    net = small_net(layers=5)
    assert [c.cell_type for c in net.cells] == ["normal", "reduction", "normal", "reduction", "normal"]


def test_too_few_layers():
    with pytest.raises(ValueError, match="reduction"):
        NetworkConfig(layers=2, channels=4)


def test_same_seed_same_weights():
    a, b = small_net(seed=3), small_net(seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    c = small_net(seed=4)
    assert not np.array_equal(a.stem_conv.w.data, c.stem_conv.w.data)


def test_supernetwork_count_matches_enumeration():
    net = build_supernetwork(CellSpec(), 8, 8, NORMAL_OPS, REDUCTION_OPS, seed=0)
    brute = sum(p.data.size for _, p in net.named_parameters())
    assert supernetwork_parameter_count(net.config, net.candidates) == brute


# ----------------------------------------------------------- forward paths


@pytest.fixture(scope="module")
def net():
    return small_net()


@pytest.fixture(scope="module")
def batch():
    return np.random.default_rng(1).standard_normal((4, 3, 8, 8))


def test_one_hot_mixed_equals_discrete(net, batch):
    rng = np.random.default_rng(5)
    for _ in range(5):
        g = random_genotype(rng, net.candidates)
        with T.no_grad():
            a = net.mixed_forward(batch, one_hot_probs(g, net.candidates), mode="batch").data
            b = net.discrete_forward(batch, g, mode="batch").data
        assert np.max(np.abs(a - b)) < 1e-9


def test_skip_edge_passes_input_through(net, batch):
    cell = net.cells[0]
    s = T.Tensor(np.random.default_rng(2).standard_normal((4, 12, 8, 8)))
    probs = [np.eye(len(n))[n.index("none")] for n in cell.candidates]
    probs[0] = np.eye(len(cell.candidates[0]))[cell.candidates[0].index("skip_connect")]
    with T.no_grad():
        out = cell.mixed_forward(s, s, probs, mode="batch").data
        pre0 = cell.pre0(s, "batch").data
    c = pre0.shape[1]
    np.testing.assert_array_equal(out[:, :c], pre0)
    assert not out[:, c:].any()


def test_none_edge_outputs_zeros(net):
    cell = net.cells[0]
    s = T.Tensor(np.ones((2, 12, 8, 8)))
    probs = [np.eye(len(n))[n.index("none")] for n in cell.candidates]
    with T.no_grad():
        assert not cell.mixed_forward(s, s, probs, mode="batch").data.any()


def test_probability_length_mismatch(net, batch):
    probs = {ct: [np.ones(3) / 3 for _ in EDGES] for ct in CELL_TYPES}
    with pytest.raises(ValueError, match="probabilities"):
        net.mixed_forward(batch, probs, mode="batch")


def test_all_none_gives_classifier_bias(net, batch):
    net.fc_b.data[:] = [0.5, -1.0, 2.0]
    with T.no_grad():
        out = net.discrete_forward(batch, Genotype(), mode="batch").data
    net.fc_b.data[:] = 0
    np.testing.assert_array_equal(out, np.tile([0.5, -1.0, 2.0], (4, 1)))


def test_all_skip_is_finite(net, batch):
    g = Genotype({e: "skip_connect" for e in EDGES}, {e: "skip_connect" for e in EDGES})
    with T.no_grad():
        out = net.discrete_forward(batch, g, mode="batch").data
    assert out.shape == (4, 3) and np.all(np.isfinite(out))


def test_discrete_matches_standalone_copy(net, batch):
    rng = np.random.default_rng(9)
    for _ in range(3):
        g = random_genotype(rng, net.candidates)
        sub = standalone_copy(net, g)
        with T.no_grad():
            a = net.discrete_forward(batch, g, mode="batch").data
            b = sub.discrete_forward(batch, g, mode="batch").data
        assert np.max(np.abs(a - b)) < 1e-9


def test_stale_genotype_rejected(net, batch):
    alpha = AlphaTable.uniform(net.candidates)
    for ct in CELL_TYPES:
        for a in alpha.values[ct]:
            a[:] = np.arange(len(a))
    shrunk = shrink_opset(alpha, {"normal": 2, "reduction": 2})
    small = SuperNetwork(net.config, shrunk.ops, seed=0)
    with pytest.raises(InvalidGenotypeError, match="sep_conv_3x3"):
        small.discrete_forward(batch, Genotype({(0, 2): "sep_conv_3x3"}))


def test_discrete_forward_only_touches_chosen_weights(net, batch):
    g = Genotype({(0, 2): "conv_1x1", (1, 3): "sep_conv_5x5"}, {(0, 2): "max_pool_3x3"})
    out = net.discrete_forward(batch, g, mode="batch")
    T.backward(T.sum_all(out))
    used = {id(p) for p in net.op_parameters(g)}
    for name, p in net.named_parameters():
        if id(p) not in used:
            assert p.grad is None, name
        p.grad = None


# ----------------------------------------------------------- param counting


def test_conv_1x1_closed_form():
    assert op_param_count("conv_1x1", 8) == 64 + 16


@pytest.mark.parametrize("op", ["none", "skip_connect", "max_pool_3x3", "avg_pool_3x3", "max_pool_7x7"])
def test_param_free_ops(op):
    assert op_param_count(op, 16) == 0


def test_all_none_is_backbone_floor():
    cfg = NetworkConfig(5, 4)
    assert count_parameters(Genotype(), cfg) == backbone_parameter_count(cfg)
    sub = SuperNetwork(cfg, {ct: [("none",)] * 14 for ct in CELL_TYPES}, seed=0)
    assert sub.num_parameters() == backbone_parameter_count(cfg)


def test_all_skip_is_backbone_floor():
    cfg = NetworkConfig(5, 4)
    g = Genotype({e: "skip_connect" for e in EDGES}, {e: "skip_connect" for e in EDGES})
    assert count_parameters(g, cfg) == backbone_parameter_count(cfg)


@pytest.mark.parametrize("layers,channels", [(3, 2), (5, 4), (8, 6)])
def test_count_matches_enumeration(layers, channels):
    cfg = NetworkConfig(layers, channels)
    rng = np.random.default_rng(layers)
    cands = full_candidates()
    for _ in range(5):
        g = random_genotype(rng, cands)
        sub = SuperNetwork(cfg, {ct: [(g.op(ct, e),) for e in EDGES] for ct in CELL_TYPES}, seed=0)
        assert count_parameters(g, cfg) == sum(p.data.size for p in sub.parameters())


def test_count_matches_op_parameters_of_supernet(net):
    rng = np.random.default_rng(11)
    g = random_genotype(rng, net.candidates)
    assert count_parameters(g, net.config) == sum(p.size for p in net.op_parameters(g))


@given(st.sampled_from(EDGES), st.sampled_from(NORMAL_OPS[1:]), st.sampled_from(REDUCTION_OPS[1:]))
@settings(max_examples=30, deadline=None)
def test_count_monotone_when_none_replaced(edge, nop, rop):
    cfg = NetworkConfig(5, 4)
    base = Genotype({edge: "none"}, {edge: "none"})
    assert count_parameters(Genotype({edge: nop}, {}), cfg) >= count_parameters(base, cfg)
    assert count_parameters(Genotype({}, {edge: rop}), cfg) >= count_parameters(base, cfg)


# ---------------------------------------------------------------- derivation


def _table(fill):
    alpha = AlphaTable.uniform(full_candidates())
    for ct in CELL_TYPES:
        for a, names in zip(alpha.values[ct], alpha.ops[ct]):
            fill(a, names)
    return alpha


def test_derive_all_skip():
    def fill(a, names):
        a[names.index("skip_connect")] = 1.0

    g = derive_genotype(_table(fill))
    assert g.normal == {e: "skip_connect" for e in EDGES}
    assert g.reduction == {e: "skip_connect" for e in EDGES}


def test_derive_all_none_is_empty():
    def fill(a, names):
        a[0] = 4.0

    g = derive_genotype(_table(fill))
    assert g.normal == {} and g.reduction == {}


def test_derive_tie_takes_lowest_index():
    def fill(a, names):
        a[3] = a[2] = 2.0

    g = derive_genotype(_table(fill))
    assert set(g.normal.values()) == {"sep_conv_3x3"}
    assert set(g.reduction.values()) == {"max_pool_3x3"}


def test_derive_has_no_indegree_cap():
    def fill(a, names):
        a[names.index("skip_connect")] = 1.0

    g = derive_genotype(_table(fill))
    assert sum(1 for (i, j) in g.normal if j == 5) == 5


@given(st.integers(0, 2**31), st.floats(-50, 50))
@settings(max_examples=25, deadline=None)
def test_derive_shift_invariant(seed, c):
    rng = np.random.default_rng(seed)

    def fill(a, names):
        a[:] = rng.integers(-3, 4, size=len(a))

    alpha = _table(fill)
    shifted = alpha.copy()
    for ct in CELL_TYPES:
        for a in shifted.values[ct]:
            a += c
    # integer-valued logits keep ties exact under the shift
    assert derive_genotype(alpha) == derive_genotype(shifted)


# ------------------------------------------------------------------ shrinking


def test_shrink_keep_all_is_identity():
    alpha = _table(lambda a, names: a.__setitem__(slice(None), np.arange(len(a))[::-1]))
    out = shrink_opset(alpha, {"normal": 10, "reduction": 6})
    assert out.ops == alpha.ops
    assert all(not a.any() for ct in CELL_TYPES for a in out.values[ct])


def test_shrink_example():
    alpha = AlphaTable({"normal": [("a", "b", "c", "d")], "reduction": [("a", "b", "c", "d")]},
                       {"normal": [np.array([3.0, 1, 2, 0])], "reduction": [np.array([3.0, 1, 2, 0])]},
                       edges=((0, 2),))
    out = shrink_opset(alpha, 2)
    assert out.ops["normal"] == [("a", "c")]


def test_shrink_rejects_bad_keep():
    alpha = AlphaTable.uniform(full_candidates())
    with pytest.raises(ValueError, match=">= 1"):
        shrink_opset(alpha, 0)
    with pytest.raises(ValueError, match="cannot keep"):
        shrink_opset(alpha, {"normal": 4, "reduction": 7})


@given(st.integers(0, 2**31), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_shrink_keeps_highest_and_order(seed, keep):
    rng = np.random.default_rng(seed)
    alpha = _table(lambda a, names: a.__setitem__(slice(None), rng.standard_normal(len(a))))
    out = shrink_opset(alpha, keep)
    for ct in CELL_TYPES:
        for names, a, kept in zip(alpha.ops[ct], alpha.values[ct], out.ops[ct]):
            assert len(kept) == keep <= len(names)
            assert set(kept) <= set(names)
            idx = [names.index(k) for k in kept]
            assert idx == sorted(idx)
            dropped = [a[i] for i in range(len(names)) if i not in idx]
            assert not dropped or min(a[idx]) >= max(dropped)


# -------------------------------------------------------------- serialization


def test_genotype_json_roundtrip():
    g = Genotype({(0, 2): "conv_1x1", (1, 3): "none"}, {(1, 2): "max_pool_5x5"})
    d = json.loads(g.to_json())
    assert d == {"normal": [[0, 2, "conv_1x1"]], "reduction": [[1, 2, "max_pool_5x5"]]}
    assert Genotype.from_json(g.to_json()) == g.pruned()


def test_genotype_json_error_has_offset():
    with pytest.raises(GenotypeFormatError, match="byte offset 12"):
        Genotype.from_json('{"normal": [}')


def test_genotype_json_bad_entry():
    with pytest.raises(GenotypeFormatError, match="bad normal entry"):
        Genotype.from_json('{"normal": [[0, "x", "conv_1x1"]]}')


def test_dot_export():
    g = Genotype({(0, 2): "conv_1x1", (2, 3): "skip_connect"}, {})
    dot = to_dot(g, "normal")
    assert dot.startswith("digraph normal_cell {")
    assert '"c_{k-2}" -> "0" [label="conv_1x1"];' in dot
    assert '"0" -> "1" [label="skip_connect"];' in dot
    assert dot.count("-> \"c_{k}\"") == 4
