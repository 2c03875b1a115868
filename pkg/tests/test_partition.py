import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3d.graph import SbmConfig, build_graph, generate_hierarchical_sbm, toy_graph
from m3d.partition import (
    GraphPartitioner,
    Partition,
    capacity,
    load_partition,
    partition_graph,
    partition_metrics,
    save_partition,
)


def _random_graph(n, p, seed):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < p
    src, dst = iu[keep], ju[keep]
    return build_graph(
        n, np.r_[src, dst], np.r_[dst, src], np.zeros((n, 1)), np.zeros(n, dtype=int), np.zeros(n, dtype=int)
    )


class TestPartitionGraph:
    def test_toy_graph_two_triangles(self):
        for seed in range(10):
            part = partition_graph(toy_graph(), 2, seed=seed)
            a = part.assignment
            assert len(set(a[:3])) == 1 and len(set(a[3:])) == 1 and a[0] != a[3]
            assert partition_metrics(toy_graph(), part) == (2, 1.0)

    def test_single_cluster(self):
        part = partition_graph(toy_graph(), 1)
        np.testing.assert_array_equal(part.assignment, np.zeros(6))
        assert partition_metrics(toy_graph(), part)[0] == 0

    def test_more_clusters_than_nodes(self):
        with pytest.raises(ValueError, match="exceeds"):
            partition_graph(toy_graph(), 7)

    def test_zero_clusters(self):
        with pytest.raises(ValueError):
            partition_graph(toy_graph(), 0)

    def test_recovers_planted_clusters(self):
        cfg = SbmConfig(nodes_per_cluster=60, p_intra=0.2, p_cross_same=0.002, p_cross_diff=0.002, seed=4)
        g, truth = generate_hierarchical_sbm(cfg, return_truth=True)
        part = partition_graph(g, 6, seed=0)
        # each found cluster is dominated by one planted cluster
        purity = sum(np.bincount(truth.cluster[part.members(c)]).max() for c in range(6)) / g.n_nodes
        assert purity > 0.95

    def test_deterministic(self):
        g = _random_graph(40, 0.1, 1)
        a = partition_graph(g, 4, seed=3).assignment
        b = partition_graph(g, 4, seed=3).assignment
        np.testing.assert_array_equal(a, b)

    def test_capacity_exact_integer(self):
        assert capacity(100, 10, 0.1) == 11
        assert capacity(6, 2, 0.0) == 3

    @settings(max_examples=40, deadline=None)
    @given(st.integers(8, 40), st.floats(0.0, 0.4), st.integers(1, 6), st.integers(0, 1000))
    def test_every_node_assigned_and_balanced(self, n, p, k, seed):
        g = _random_graph(n, p, seed)
        part = partition_graph(g, k, seed=seed)
        part.validate(n)
        assert part.sizes.sum() == n
        # growth alone is perfectly balanced; refinement stays under the cap
        assert part.sizes.max() <= capacity(n, k, 0.1)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(10, 40), st.floats(0.05, 0.4), st.integers(2, 5), st.integers(0, 1000))
    def test_refinement_never_increases_cut(self, n, p, k, seed):
        g = _random_graph(n, p, seed)
        rough = partition_graph(g, k, seed=seed, refine=False)
        fine = partition_graph(g, k, seed=seed, refine=True)
        assert partition_metrics(g, fine)[0] <= partition_metrics(g, rough)[0]


class TestPartitionFile:
    def test_round_trip(self, tmp_path):
        part = partition_graph(toy_graph(), 2)
        loaded = load_partition(save_partition(part, tmp_path / "partition.tsv"), 6)
        np.testing.assert_array_equal(loaded.assignment, part.assignment)
        assert loaded.p == 2

    def test_missing_node(self, tmp_path):
        path = tmp_path / "p.tsv"
        path.write_text("0\t0\n2\t1\n")
        with pytest.raises(ValueError, match="every node"):
            load_partition(path, 3)

    def test_empty_cluster_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            Partition(np.array([0, 0, 2]), 3).validate()


class TestGraphPartitioner:
    def test_fit_sets_attributes(self):
        est = GraphPartitioner(n_clusters=2).fit(toy_graph())
        assert est.labels_.shape == (6,)
        assert est.edge_cut_ == 2
        assert est.balance_ == 1.0
        assert est.get_params()["n_clusters"] == 2

    def test_rejects_non_graph(self):
        with pytest.raises(TypeError):
            GraphPartitioner().fit(np.zeros((3, 3)))
