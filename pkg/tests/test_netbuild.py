import numpy as np
import pytest
from conftest import make_dataset

from attribrec import netbuild
from attribrec.errors import DataError
from attribrec.ingest import ItemAttributes


def brute_force_pair_counts(positives):
    counts = {}
    for hist in positives:
        hist = sorted(hist)
        for a in range(len(hist)):
            for b in range(a + 1, len(hist)):
                e = (hist[a], hist[b])
                counts[e] = counts.get(e, 0) + 1
    return counts


class TestBuildCopurchase:
    def test_definition(self):
        ds = make_dataset([(0, 1), (1, 2)], [[{"x"}]] * 3)
        g = netbuild.build_copurchase(ds)
        assert g.edges == frozenset({(0, 1), (1, 2)})  # no 0-2 edge

    def test_single_item_history_no_edges(self):
        ds = make_dataset([(0,)], [[{"x"}]] * 2)
        assert netbuild.build_copurchase(ds).edges == frozenset()

    def test_co_min_threshold_and_weight(self):
        ds = make_dataset([(0, 1)] * 3, [[{"x"}]] * 2)
        g = netbuild.build_copurchase(ds, co_min=2)
        assert g.edges == frozenset({(0, 1)})
        assert g.weights[(0, 1)] == 3

    def test_weights_match_brute_force(self):
        rng = np.random.default_rng(5)
        positives = [
            tuple(sorted(rng.choice(15, size=4, replace=False).tolist()))
            for _ in range(8)
        ]
        ds = make_dataset(positives, [[{"x"}]] * 15)
        g = netbuild.build_copurchase(ds)
        assert g.weights == brute_force_pair_counts(positives)

    def test_no_self_loops(self):
        ds = make_dataset([(0, 1, 2)], [[{"x"}]] * 3)
        g = netbuild.build_copurchase(ds)
        assert all(i != j for i, j in g.edges)


class TestInduceAttributeNetwork:
    def test_shared_director_filter(self, tiny_ds):
        # edges {0-1, 0-2, 1-2, 1-3, 2-3, 0-3, 0-4, 3-4}; director net keeps
        # only pairs within {0,1,2} (d1) or {3,4} (d2)
        g = netbuild.build_copurchase(tiny_ds)
        net = netbuild.induce_attribute_network(g, tiny_ds.attributes, 0)
        kept = set(map(tuple, netbuild._upper_edges(net.adjacency)))
        expected = {e for e in g.edges if ({0, 1, 2} >= set(e) or {3, 4} >= set(e))}
        assert kept == expected

    def test_all_items_share_value_gives_identity(self):
        ds = make_dataset([(0, 1, 2), (1, 2, 3)], [[{"same"}]] * 4)
        g = netbuild.build_copurchase(ds)
        net = netbuild.induce_attribute_network(g, ds.attributes, 0)
        assert set(map(tuple, netbuild._upper_edges(net.adjacency))) == set(g.edges)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(11)
        n = 20
        positives = [
            tuple(sorted(rng.choice(n, size=5, replace=False).tolist()))
            for _ in range(10)
        ]
        attributes = [
            [{f"v{rng.integers(4)}"}, {f"w{rng.integers(3)}", f"w{rng.integers(3)}"}]
            for _ in range(n)
        ]
        ds = make_dataset(positives, attributes)
        g = netbuild.build_copurchase(ds)
        for k in range(2):
            net = netbuild.induce_attribute_network(g, ds.attributes, k)
            dense = net.adjacency.toarray()
            for i in range(n):
                for j in range(n):
                    expected = float(
                        i != j
                        and ((min(i, j), max(i, j)) in g.edges)
                        and bool(ds.attributes[i][k] & ds.attributes[j][k])
                    )
                    assert dense[i, j] == expected

    def test_subgraph_symmetry_zero_diagonal(self, tiny_nets):
        co = tiny_nets.co_graph
        for net in tiny_nets.graphs:
            adj = net.adjacency.toarray()
            assert np.array_equal(adj, adj.T)
            assert np.all(np.diag(adj) == 0)
            for i, j in map(tuple, netbuild._upper_edges(net.adjacency)):
                assert (i, j) in co.edges

    def test_union_of_networks_within_copurchase(self, tiny_nets):
        union = set()
        for net in tiny_nets.graphs:
            union |= set(map(tuple, netbuild._upper_edges(net.adjacency)))
        assert union <= set(tiny_nets.co_graph.edges)


class TestAttachColdItem:
    def test_indicator_of_matching_items(self, tiny_nets):
        cold = ItemAttributes("new", (frozenset({"d1"}), frozenset({"zz"})))
        rows = netbuild.attach_cold_item(tiny_nets, cold)
        assert rows.shape == (2, 5)
        assert rows[0].tolist() == [1, 1, 1, 0, 0]  # items 0-2 have d1
        assert rows[1].tolist() == [0, 0, 0, 0, 0]

    def test_unseen_values_warn(self, tiny_nets, caplog):
        cold = ItemAttributes("new", (frozenset({"zz"}), frozenset({"qq"})))
        with caplog.at_level("WARNING"):
            rows = netbuild.attach_cold_item(tiny_nets, cold)
        assert not rows.any()
        assert "unattached cold item" in caplog.text

    def test_matches_brute_force_scan(self, tiny_nets):
        rng = np.random.default_rng(3)
        vocab = ["d1", "d2", "a1", "a2", "a3", "zz"]
        for t in range(10):
            vals = tuple(
                frozenset(rng.choice(vocab, size=2).tolist()) for _ in range(2)
            )
            cold = ItemAttributes(f"c{t}", vals)
            rows = netbuild.attach_cold_item(tiny_nets, cold)
            for k in range(2):
                for j in range(tiny_nets.n_items):
                    assert rows[k, j] == float(bool(vals[k] & tiny_nets.item_attrs[j][k]))

    def test_existing_networks_not_mutated(self, tiny_nets):
        before = [net.adjacency.toarray().copy() for net in tiny_nets.graphs]
        cold = ItemAttributes("new", (frozenset({"d1"}), frozenset({"a1"})))
        netbuild.attach_cold_item(tiny_nets, cold)
        for net, prev in zip(tiny_nets.graphs, before):
            assert np.array_equal(net.adjacency.toarray(), prev)

    def test_existing_id_rejected(self, tiny_nets):
        cold = ItemAttributes("i0", (frozenset({"d1"}), frozenset({"a1"})))
        with pytest.raises(DataError, match="already exists"):
            netbuild.attach_cold_item(tiny_nets, cold)


class TestSerialization:
    def test_round_trip(self, tiny_nets, tmp_path):
        path = tmp_path / "nets.json"
        netbuild.save_networks(tiny_nets, str(path))
        loaded = netbuild.load_networks(str(path))
        assert loaded.item_ids == tiny_nets.item_ids
        assert loaded.field_names == tiny_nets.field_names
        assert loaded.item_attrs == tiny_nets.item_attrs
        assert loaded.co_graph.edges == tiny_nets.co_graph.edges
        assert loaded.co_graph.weights == tiny_nets.co_graph.weights
        for a, b in zip(loaded.graphs, tiny_nets.graphs):
            assert np.array_equal(a.adjacency.toarray(), b.adjacency.toarray())

    def test_edge_list_export(self, tiny_nets, tmp_path):
        paths = netbuild.export_edge_lists(tiny_nets, str(tmp_path))
        assert len(paths) == 3  # co-purchase + 2 attribute networks
        co_lines = (tmp_path / "copurchase_edges.tsv").read_text().splitlines()
        assert len(co_lines) == len(tiny_nets.co_graph.edges)
        assert all(len(line.split("\t")) == 3 for line in co_lines)
