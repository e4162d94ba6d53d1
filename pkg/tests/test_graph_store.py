import numpy as np
import pytest

from graphsfda.errors import ContractError, ParseError
from graphsfda.gnn import forward, init_model, pretrain_source
from graphsfda.graph_store import (
    ShiftSpec,
    TargetGraph,
    load_graph,
    make_shift_pair,
    neighbor_lists,
    normalize_adjacency,
    save_graph,
    split_nodes,
)
from graphsfda.numerics import DenseMatrix

from conftest import random_graph


def single_node_graph():
    return TargetGraph(1, [], DenseMatrix.from_rows([[1.0]]), [0], 1)


class TestTargetGraph:
    def test_rejects_self_loop(self):
        with pytest.raises(ContractError):
            TargetGraph(2, [(1, 1)], DenseMatrix.zeros(2, 1), None, 2)

    def test_rejects_duplicate(self):
        with pytest.raises(ContractError):
            TargetGraph(2, [(0, 1), (1, 0)], DenseMatrix.zeros(2, 1), None, 2)

    def test_rejects_out_of_range(self):
        with pytest.raises(ContractError):
            TargetGraph(2, [(0, 2)], DenseMatrix.zeros(2, 1), None, 2)

    def test_feature_row_mismatch(self):
        with pytest.raises(ContractError):
            TargetGraph(3, [], DenseMatrix.zeros(2, 1), None, 2)


class TestNormalizeAdjacency:
    def test_isolated_node(self):
        adj = normalize_adjacency(single_node_graph())
        assert np.array_equal(adj.densify().a, [[1.0]])

    def test_two_nodes_one_edge(self):
        g = TargetGraph(2, [(0, 1)], DenseMatrix.zeros(2, 1), None, 1)
        dense = normalize_adjacency(g).densify().a
        assert np.allclose(dense, [[0.5, 0.5], [0.5, 0.5]], atol=1e-12)

    def test_zero_weight_equals_deletion(self, rng):
        g = random_graph(rng, 8, 3, 2)
        weights = np.ones(g.num_edges)
        weights[0] = 0.0
        masked = normalize_adjacency(g, weights).densify().a
        removed = normalize_adjacency(
            TargetGraph(g.n, g.edges[1:], g.features, g.labels, g.num_classes)
        ).densify().a
        assert np.array_equal(masked, removed) or np.max(np.abs(masked - removed)) <= 1e-15

    def test_weight_out_of_range(self, rng):
        g = random_graph(rng, 5, 2, 2)
        bad = np.ones(g.num_edges)
        bad[0] = 1.5
        with pytest.raises(ContractError):
            normalize_adjacency(g, bad)

    def test_exactly_symmetric(self, rng):
        g = random_graph(rng, 20, 2, 2, edge_p=0.4)
        w = rng.uniform(0.0, 1.0, g.num_edges)
        dense = normalize_adjacency(g, w).densify().a
        assert np.array_equal(dense, dense.T)  # bitwise, by shared per-edge values

    def test_row_sums_positive(self, rng):
        g = random_graph(rng, 15, 2, 2, edge_p=0.3)
        sums = normalize_adjacency(g).densify().a.sum(axis=1)
        assert np.all(sums > 0)

    def test_row_sums_one_on_regular_graphs(self):
        # cycle: every node has degree 2, so normalization gives rows summing to 1
        n = 6
        g = TargetGraph(n, [(i, (i + 1) % n) for i in range(n)], DenseMatrix.zeros(n, 1), None, 1)
        sums = normalize_adjacency(g).densify().a.sum(axis=1)
        assert np.max(np.abs(sums - 1.0)) <= 1e-12


class TestFileFormat:
    def test_round_trip(self, tmp_path, rng):
        g = random_graph(rng, 9, 4, 3)
        save_graph(g, tmp_path / "g")
        back = load_graph(tmp_path / "g")
        assert back.n == g.n
        assert back.edges == g.edges
        assert np.array_equal(back.features.a, g.features.a)
        assert np.array_equal(back.labels, g.labels)
        assert back.num_classes == g.num_classes

    def test_small_fixture(self, tmp_path):
        (tmp_path / "t.meta").write_text("2 3 2\n")
        (tmp_path / "t.edges").write_text("0 1\n")
        (tmp_path / "t.feat").write_text("1 2 3\n4 5 6\n")
        g = load_graph(tmp_path / "t")
        assert g.n == 2 and g.edges == ((0, 1),) and g.labels is None

    def test_self_loop_is_parse_error(self, tmp_path):
        (tmp_path / "t.meta").write_text("6 1 2\n")
        (tmp_path / "t.edges").write_text("0 1\n5 5\n")
        (tmp_path / "t.feat").write_text("\n".join("0") * 6)
        with pytest.raises(ParseError, match="t.edges:2"):
            load_graph(tmp_path / "t")

    def test_feature_count_mismatch(self, tmp_path):
        (tmp_path / "t.meta").write_text("3 1 2\n")
        (tmp_path / "t.edges").write_text("")
        (tmp_path / "t.feat").write_text("1\n2\n")
        with pytest.raises(ContractError):
            load_graph(tmp_path / "t")

    def test_duplicate_edge_line(self, tmp_path):
        (tmp_path / "t.meta").write_text("3 1 2\n")
        (tmp_path / "t.edges").write_text("0 1\n0 1\n")
        (tmp_path / "t.feat").write_text("1\n2\n3\n")
        with pytest.raises(ParseError, match="duplicate"):
            load_graph(tmp_path / "t")

    def test_reversed_pair_symmetrized_with_warning(self, tmp_path):
        (tmp_path / "t.meta").write_text("3 1 2\n")
        (tmp_path / "t.edges").write_text("0 1\n1 0\n")
        (tmp_path / "t.feat").write_text("1\n2\n3\n")
        with pytest.warns(UserWarning, match="symmetrized"):
            g = load_graph(tmp_path / "t")
        assert g.edges == ((0, 1),)

    def test_malformed_feature_line(self, tmp_path):
        (tmp_path / "t.meta").write_text("1 2 2\n")
        (tmp_path / "t.edges").write_text("")
        (tmp_path / "t.feat").write_text("1 xyz\n")
        with pytest.raises(ParseError, match="t.feat:1"):
            load_graph(tmp_path / "t")


class TestSplitNodes:
    def test_exact_sizes_n10(self, rng):
        g = random_graph(rng, 10, 2, 2)
        s = split_nodes(g, seed=3)
        assert (len(s.train), len(s.val), len(s.test)) == (8, 1, 1)

    def test_deterministic(self, rng):
        g = random_graph(rng, 37, 2, 2)
        a, b = split_nodes(g, seed=7), split_nodes(g, seed=7)
        assert np.array_equal(a.train, b.train)
        assert np.array_equal(a.val, b.val)
        assert np.array_equal(a.test, b.test)

    def test_seeds_differ(self, rng):
        g = random_graph(rng, 100, 2, 2)
        a, b = split_nodes(g, seed=1), split_nodes(g, seed=2)
        assert not np.array_equal(a.train, b.train)

    def test_disjoint_cover(self, rng):
        g = random_graph(rng, 53, 2, 2)
        s = split_nodes(g, seed=11)
        ids = np.concatenate([s.train, s.val, s.test])
        assert np.array_equal(np.sort(ids), np.arange(53))

    def test_needs_labels(self, rng):
        g = random_graph(rng, 10, 2, 2, labelled=False)
        with pytest.raises(ContractError):
            split_nodes(g, seed=0)


class TestShiftSpec:
    def test_validation(self):
        with pytest.raises(ContractError):
            ShiftSpec(edge_noise=1.5)
        with pytest.raises(ContractError):
            ShiftSpec(intra_p=2.0)


class TestMakeShiftPair:
    def test_deterministic(self):
        spec = ShiftSpec(nodes_per_class=20, seed=9)
        s1, t1 = make_shift_pair(spec)
        s2, t2 = make_shift_pair(spec)
        assert s1.edges == s2.edges and t1.edges == t2.edges
        assert np.array_equal(s1.features.a, s2.features.a)
        assert np.array_equal(t1.features.a, t2.features.a)

    def test_shared_spaces(self):
        src, tgt = make_shift_pair(ShiftSpec(nodes_per_class=15, seed=2))
        assert src.num_classes == tgt.num_classes
        assert src.feature_dim == tgt.feature_dim
        assert src.labels is not None and tgt.labels is not None

    def test_no_shift_class_means_close(self):
        # with every shift knob at zero the two domains are iid draws, so
        # class-conditional means differ by sampling noise only
        spec = ShiftSpec(
            nodes_per_class=200,
            num_classes=3,
            feature_dim=8,
            target_mean_shift=0.0,
            edge_noise=0.0,
            seed=5,
        )
        src, tgt = make_shift_pair(spec)
        se = np.sqrt(2.0 / spec.nodes_per_class)  # unit feature noise, two samples
        for c in range(spec.num_classes):
            mu_s = src.features.a[src.labels == c].mean(axis=0)
            mu_t = tgt.features.a[tgt.labels == c].mean(axis=0)
            assert np.max(np.abs(mu_s - mu_t)) < 3.0 * se

    def test_larger_shift_degrades_frozen_model(self):
        # monotone trend of source-model accuracy in the shift magnitude
        mean_acc = []
        for shift in (0.0, 1.0, 2.5):
            accs = []
            for seed in range(1, 4):
                spec = ShiftSpec(
                    nodes_per_class=60,
                    feature_dim=16,
                    target_mean_shift=shift,
                    edge_noise=0.1,
                    seed=seed,
                )
                src, tgt = make_shift_pair(spec)
                model = init_model(16, 24, 3, 2, seed=seed)
                trained, _ = pretrain_source(
                    model, src, split_nodes(src, seed), epochs=100, lr=1e-2
                )
                fo = forward(trained, normalize_adjacency(tgt), tgt.features)
                accs.append(np.mean(np.argmax(fo.predictions.a, axis=1) == tgt.labels))
            mean_acc.append(np.mean(accs))
        assert mean_acc[0] >= mean_acc[1] >= mean_acc[2]


def test_neighbor_lists_with_mask(rng):
    g = TargetGraph(4, [(0, 1), (1, 2), (2, 3)], DenseMatrix.zeros(4, 1), None, 1)
    full = neighbor_lists(g)
    assert [list(x) for x in full] == [[1], [0, 2], [1, 3], [2]]
    masked = neighbor_lists(g, edge_keep=np.array([True, False, True]))
    assert [list(x) for x in masked] == [[1], [0], [3], [2]]
