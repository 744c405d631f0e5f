"""Co-purchase graph construction and its per-attribute induced subgraphs.

Two items are linked when at least ``co_min`` users have both in their
training history. The attribute network for field ``k`` keeps only the links
whose endpoints share at least one value of field ``k`` (value sets may be
multi-valued, so "share" means the sets intersect). Cold items with no
purchase history attach to the attribute networks by attribute sharing alone.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import sparse

from ._util import atomic_write_text
from .errors import DataError
from .ingest import InteractionDataset, ItemAttributes

log = logging.getLogger(__name__)

NETWORKS_SCHEMA_VERSION = 1


@dataclass(frozen=True, eq=False)
class CoPurchaseGraph:
    n_items: int
    edges: frozenset[tuple[int, int]]  # (i, j) with i < j
    weights: dict[tuple[int, int], int]  # co-purchase counts, diagnostics only


@dataclass(frozen=True, eq=False)
class AttributeNetwork:
    attribute_index: int
    adjacency: sparse.csr_matrix  # symmetric binary, zero diagonal

    @property
    def n_items(self) -> int:
        return self.adjacency.shape[0]

    def dense_row(self, i: int) -> np.ndarray:
        return self.adjacency[i].toarray().ravel()

    def dense_rows(self, idx) -> np.ndarray:
        return self.adjacency[np.asarray(idx, dtype=int)].toarray()


@dataclass(frozen=True, eq=False)
class AttributeNetworkSet:
    co_graph: CoPurchaseGraph
    graphs: tuple[AttributeNetwork, ...]
    item_ids: tuple[str, ...]
    item_attrs: tuple[tuple[frozenset[str], ...], ...]
    field_names: tuple[str, ...]

    @property
    def n_items(self) -> int:
        return self.co_graph.n_items

    @property
    def n_fields(self) -> int:
        return len(self.graphs)


def build_copurchase(ds: InteractionDataset, co_min: int = 1) -> CoPurchaseGraph:
    """Count item pairs over training positives; keep pairs seen by >= co_min users.

    Held-out items never enter ``ds.positives``, so they contribute no edges.
    """
    if co_min < 1:
        raise DataError(f"co_min must be >= 1, got {co_min}")
    counts: dict[tuple[int, int], int] = {}
    for hist in ds.positives:
        for i, j in combinations(sorted(hist), 2):
            counts[(i, j)] = counts.get((i, j), 0) + 1
    weights = {e: c for e, c in counts.items() if c >= co_min}
    return CoPurchaseGraph(ds.n_items, frozenset(weights), weights)


def _edges_to_csr(n: int, edges) -> sparse.csr_matrix:
    if not edges:
        return sparse.csr_matrix((n, n), dtype=np.float64)
    arr = np.asarray(sorted(edges), dtype=int)
    rows = np.concatenate([arr[:, 0], arr[:, 1]])
    cols = np.concatenate([arr[:, 1], arr[:, 0]])
    data = np.ones(len(rows), dtype=np.float64)
    return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


def induce_attribute_network(
    g: CoPurchaseGraph, item_attrs, k: int
) -> AttributeNetwork:
    """Keep the co-purchase edges whose endpoints share a value of field k."""
    if not 0 <= k < len(item_attrs[0]):
        raise DataError(f"attribute index {k} out of range")
    kept = [(i, j) for i, j in g.edges if item_attrs[i][k] & item_attrs[j][k]]
    return AttributeNetwork(k, _edges_to_csr(g.n_items, kept))


def build_network_set(ds: InteractionDataset, co_min: int = 1) -> AttributeNetworkSet:
    """Build the co-purchase graph and all K attribute networks for a dataset."""
    g = build_copurchase(ds, co_min)
    graphs = tuple(
        induce_attribute_network(g, ds.attributes, k) for k in range(ds.n_fields)
    )
    return AttributeNetworkSet(
        co_graph=g,
        graphs=graphs,
        item_ids=ds.items,
        item_attrs=ds.attributes,
        field_names=ds.field_names,
    )


def attach_cold_item(net_set: AttributeNetworkSet, attrs: ItemAttributes) -> np.ndarray:
    """Adjacency rows of a new, never-purchased item against each attribute network.

    Row k marks every existing item whose field-k values intersect the new
    item's; the co-purchase requirement is waived because the item has no
    history. Existing networks are not touched. Returns an array (K, n_items).
    """
    if attrs.item_id in set(net_set.item_ids):
        raise DataError(f"cold item {attrs.item_id!r} already exists in the index space")
    if len(attrs.values) != net_set.n_fields:
        raise DataError(
            f"cold item {attrs.item_id!r} has {len(attrs.values)} fields, "
            f"expected {net_set.n_fields}"
        )
    rows = np.zeros((net_set.n_fields, net_set.n_items), dtype=np.float64)
    for k in range(net_set.n_fields):
        vals = attrs.values[k]
        if not vals:
            continue
        for j, item_vals in enumerate(net_set.item_attrs):
            if vals & item_vals[k]:
                rows[k, j] = 1.0
    if not rows.any():
        log.warning(
            "unattached cold item %s: no attribute value matches any existing item; "
            "recommendation quality undefined",
            attrs.item_id,
        )
    return rows


def networks_to_json(net_set: AttributeNetworkSet) -> str:
    co = net_set.co_graph
    doc = {
        "schema_version": NETWORKS_SCHEMA_VERSION,
        "n_items": co.n_items,
        "item_ids": list(net_set.item_ids),
        "field_names": list(net_set.field_names),
        "item_attrs": [[sorted(s) for s in item] for item in net_set.item_attrs],
        "co_edges": [[i, j, co.weights[(i, j)]] for i, j in sorted(co.edges)],
        "networks": [
            {
                "attribute_index": g.attribute_index,
                "edges": _upper_edges(g.adjacency),
            }
            for g in net_set.graphs
        ],
    }
    return json.dumps(doc)


def _upper_edges(adj: sparse.csr_matrix) -> list[list[int]]:
    coo = sparse.triu(adj, k=1).tocoo()
    order = np.lexsort((coo.col, coo.row))
    return [[int(coo.row[t]), int(coo.col[t])] for t in order]


def networks_from_json(text: str) -> AttributeNetworkSet:
    doc = json.loads(text)
    if doc.get("schema_version") != NETWORKS_SCHEMA_VERSION:
        raise DataError(
            f"networks artifact has schema_version {doc.get('schema_version')}, "
            f"expected {NETWORKS_SCHEMA_VERSION}"
        )
    n = doc["n_items"]
    weights = {(i, j): w for i, j, w in doc["co_edges"]}
    co = CoPurchaseGraph(n, frozenset(weights), weights)
    graphs = tuple(
        AttributeNetwork(net["attribute_index"], _edges_to_csr(n, [tuple(e) for e in net["edges"]]))
        for net in doc["networks"]
    )
    return AttributeNetworkSet(
        co_graph=co,
        graphs=graphs,
        item_ids=tuple(doc["item_ids"]),
        item_attrs=tuple(
            tuple(frozenset(vals) for vals in item) for item in doc["item_attrs"]
        ),
        field_names=tuple(doc["field_names"]),
    )


def save_networks(net_set: AttributeNetworkSet, path: str) -> None:
    atomic_write_text(path, networks_to_json(net_set))


def load_networks(path: str) -> AttributeNetworkSet:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return networks_from_json(fh.read())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read networks artifact {path!r}: {exc}") from exc


def export_edge_lists(net_set: AttributeNetworkSet, out_dir: str) -> list[str]:
    """Human-readable edge lists (item ids, one edge per line) for inspection."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    ids = net_set.item_ids
    co_lines = [
        f"{ids[i]}\t{ids[j]}\t{net_set.co_graph.weights[(i, j)]}"
        for i, j in sorted(net_set.co_graph.edges)
    ]
    path = os.path.join(out_dir, "copurchase_edges.tsv")
    atomic_write_text(path, "\n".join(co_lines) + ("\n" if co_lines else ""))
    paths.append(path)
    for g in net_set.graphs:
        name = net_set.field_names[g.attribute_index]
        lines = [f"{ids[i]}\t{ids[j]}" for i, j in _upper_edges(g.adjacency)]
        path = os.path.join(out_dir, f"attribute_edges_{name}.tsv")
        atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
        paths.append(path)
    return paths
