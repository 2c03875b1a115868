import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3d.graph import SbmConfig, build_graph, generate_hierarchical_sbm, toy_graph
from m3d.masks import (
    KINDS,
    build_designed_masks,
    build_mask,
    build_taxonomy_mask,
    export_mask,
    extend_universe,
    import_mask,
    make_mask,
    mask_stats,
)
from m3d.partition import Partition, partition_graph


@pytest.fixture
def toy():
    g = toy_graph()
    part = partition_graph(g, 2)
    return g, part, extend_universe(g, part)


def _row(mask, r):
    return set(mask.cols[mask.rows == r].tolist())


class TestUniverse:
    def test_layout_and_virtual_features(self, toy):
        g, part, u = toy
        assert u.total == 10
        np.testing.assert_array_equal(u.cluster_ids, [6, 7])
        np.testing.assert_array_equal(u.global_ids, [8, 9])
        c0 = part.assignment[0]
        np.testing.assert_allclose(u.features(g)[6 + c0], g.features[[0, 1, 2]].mean(axis=0))
        # label virtuals average training nodes only: {0} for class 0, {3} for class 1
        np.testing.assert_allclose(u.features(g)[8], g.features[0])
        np.testing.assert_allclose(u.features(g)[9], g.features[3])

    def test_empty_class_has_zero_feature(self):
        g = toy_graph()
        splits = np.array([0, 1, 2, 1, 1, 2])
        g2 = build_graph(6, *g.edge_array(), g.features, g.labels, splits, n_classes=2)
        u = extend_universe(g2, partition_graph(g2, 2))
        np.testing.assert_array_equal(u.features(g2)[9], np.zeros(3))

    def test_singleton_partition(self):
        g = toy_graph()
        part = Partition(np.arange(6), 6)
        u = extend_universe(g, part)
        np.testing.assert_allclose(u.features(g)[6:12], g.features)


class TestDesignedMasks:
    def test_toy_counts(self, toy):
        g, part, u = toy
        l2, c4, g3 = build_designed_masks(u, g, part)
        assert l2.nnz == 20
        assert c4.nnz == 18
        assert g3.nnz == 14
        assert c4.kappa == pytest.approx(0.18)

    def test_toy_regions(self, toy):
        g, part, u = toy
        l2, c4, g3 = build_designed_masks(u, g, part)
        assert len(l2.regions) == 1
        assert l2.regions[0].kappa == pytest.approx(20 / 36)
        real, virt = c4.regions
        assert (len(real.query_ids), len(real.key_ids), real.kappa) == (6, 8, 0.25)
        assert (len(virt.query_ids), len(virt.key_ids), virt.kappa) == (2, 6, 0.5)
        a, b = g3.regions
        assert (len(a.query_ids), len(a.key_ids), a.kappa) == (6, 2, 1.0)
        np.testing.assert_array_equal(b.key_ids, [0, 3])
        assert b.kappa == 0.5

    def test_c4_rows(self, toy):
        g, part, u = toy
        _, c4, _ = build_designed_masks(u, g, part)
        for v in range(6):
            assert _row(c4, v) == {v, 6 + part.assignment[v]}
        for p in range(2):
            assert _row(c4, 6 + p) == set(part.members(p).tolist())

    def test_single_cluster_c4_is_3n(self):
        g = toy_graph()
        part = partition_graph(g, 1)
        _, c4, _ = build_designed_masks(extend_universe(g, part), g, part)
        assert c4.nnz == 18

    def test_no_training_nodes_leaves_label_rows_empty(self):
        g = toy_graph()
        g2 = build_graph(6, *g.edge_array(), g.features, g.labels, np.full(6, 2), n_classes=2)
        part = partition_graph(g2, 2)
        _, _, g3 = build_designed_masks(extend_universe(g2, part), g2, part)
        assert _row(g3, 8) == set()
        assert _row(g3, 9) == set()
        assert g3.nnz == 6 * 2
        assert len(g3.regions) == 1

    def test_partition_mismatch(self, toy):
        g, part, u = toy
        other = Partition(1 - part.assignment, 2)
        with pytest.raises(ValueError):
            build_designed_masks(u, g, other)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5), st.floats(0.0, 0.5))
    def test_count_formulas(self, seed, p, train_fraction):
        cfg = SbmConfig(nodes_per_cluster=12, train_fraction=train_fraction, valid_fraction=0.1, seed=seed)
        g = generate_hierarchical_sbm(cfg)
        part = partition_graph(g, p, seed=seed)
        u = extend_universe(g, part)
        _, c4, g3 = build_designed_masks(u, g, part)
        assert c4.nnz == 3 * g.n_nodes
        assert g3.nnz == g.n_nodes * g.n_classes + len(g.train_ids)


class TestTaxonomyMasks:
    def test_l1_two_hops(self, toy):
        g, part, u = toy
        l1 = build_taxonomy_mask(u, g, part, "L1", k_hops=2)
        assert _row(l1, 0) == {0, 1, 2, 3}
        assert l1.nnz == 28

    def test_l1_one_hop_equals_l2(self, toy):
        g, part, u = toy
        l1 = build_taxonomy_mask(u, g, part, "L1", k_hops=1)
        l2 = build_mask(u, g, part, "L2")
        np.testing.assert_array_equal(l1.rows, l2.rows)
        np.testing.assert_array_equal(l1.cols, l2.cols)

    def test_counts(self, toy):
        g, part, u = toy
        counts = {k: build_taxonomy_mask(u, g, part, k).nnz for k in ("C1", "C2", "C3", "G1", "G2")}
        assert counts == {"C1": 4, "C2": 12, "C3": 18, "G1": 36, "G2": 12}

    def test_g1_kappa(self, toy):
        g, part, u = toy
        assert mask_stats(build_taxonomy_mask(u, g, part, "G1"))["regions"][0]["kappa"] == 1.0

    def test_g2_virtual_count(self, toy):
        g, part, u = toy
        g2 = build_taxonomy_mask(u, g, part, "G2", n_g2_virtual=3)
        assert g2.size == 6 + 2 + 3
        assert g2.nnz == 2 * 6 * 3

    def test_unsupported_kind(self, toy):
        g, part, u = toy
        with pytest.raises(ValueError, match="unsupported"):
            build_taxonomy_mask(u, g, part, "L2")


class TestRegions:
    @pytest.mark.parametrize("kind", KINDS)
    def test_invariants_hold_for_every_kind(self, toy, kind):
        g, part, u = toy
        mask = build_mask(u, g, part, kind).validate()
        for reg in mask.regions:
            assert 0 < reg.kappa <= 1
            assert reg.nnz <= len(reg.query_ids) * len(reg.key_ids)

    def test_empty_mask_stats(self):
        stats = mask_stats(make_mask("L2", 4, [], []))
        assert stats["nnz"] == 0
        assert stats["kappa"] == 0.0
        assert stats["regions"] == []

    def test_make_mask_sorts_and_dedupes(self):
        m = make_mask("L2", 3, [2, 0, 2, 0], [1, 1, 1, 0], layout=(3, 0, 0))
        np.testing.assert_array_equal(m.rows, [0, 0, 2])
        np.testing.assert_array_equal(m.cols, [0, 1, 1])

    def test_mode_reported_with_d_head(self, toy):
        g, part, u = toy
        stats = mask_stats(build_mask(u, g, part, "G3"), d_head=16)
        assert stats["regions"][0]["mode"] == "dense"


class TestExport:
    def test_round_trip(self, toy, tmp_path):
        g, part, u = toy
        _, c4, _ = build_designed_masks(u, g, part)
        tsv, sidecar = export_mask(c4, tmp_path / "c4")
        assert tsv.read_text().splitlines()[0] == "row\tcol"
        back = import_mask(tmp_path / "c4")
        np.testing.assert_array_equal(back.rows, c4.rows)
        np.testing.assert_array_equal(back.cols, c4.cols)
        assert back.layout == c4.layout
        assert [len(r.query_ids) for r in back.regions] == [6, 2]
