"""Merging GraphFeatures into one mini-batch, and per-layer pruning."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import SchemaError
from ..graph_store import Graph, GraphFeature
from .sparse import SparseAdj


@dataclass
class VectorizedBatch:
    adj: SparseAdj                 # A_B, entries sorted by destination row
    X: np.ndarray                  # node features, one row per distinct node
    E: np.ndarray                  # edge features aligned with adj.eid
    in_weight: np.ndarray          # full-graph weighted in-degree per row
    targets: np.ndarray            # row index of each sample's target
    labels: object                 # int vector (single-label) or 0/1 matrix
    hop: int
    node_ids: tuple[int, ...]
    pruned: list[SparseAdj] = field(default_factory=list)

    @property
    def row_index(self) -> dict[int, int]:
        return {v: i for i, v in enumerate(self.node_ids)}

    @property
    def num_rows(self) -> int:
        return len(self.node_ids)


def reverse_distances(adj: SparseAdj, targets: Sequence[int]) -> np.ndarray:
    """Hop distance from each row to the nearest target, walking in-edges backwards."""
    dist = np.full(adj.n_rows, np.iinfo(np.int64).max, dtype=np.int64)
    queue = deque()
    for t in targets:
        if dist[t] != 0:
            dist[t] = 0
            queue.append(int(t))
    while queue:
        v = queue.popleft()
        for u in adj.src[adj.indptr[v]:adj.indptr[v + 1]]:
            if dist[u] > dist[v] + 1:
                dist[u] = dist[v] + 1
                queue.append(int(u))
    return dist


def prune(adj: SparseAdj, targets: Sequence[int], hops: int) -> list[SparseAdj]:
    """One adjacency per layer with the entries that can still reach a target.

    Layer ``k`` (0-based) only needs destinations within ``hops - k - 1`` of
    some target: anything farther is never read by the remaining layers.
    """
    if hops < 1:
        raise ValueError("pruning needs at least one layer")
    dist = reverse_distances(adj, targets)
    d_dst = dist[adj.dst]
    return [adj.subset(d_dst <= hops - k - 1) for k in range(hops)]


def _label_array(labels: list):
    if labels and isinstance(labels[0], tuple):
        return np.array(labels, dtype=np.float64)
    return np.array(labels, dtype=np.int64)


def vectorize(samples: Sequence[tuple[int, object, GraphFeature]]) -> VectorizedBatch:
    """Merge ``(target, label, GraphFeature)`` samples, de-duplicating shared nodes."""
    if not samples:
        raise SchemaError("cannot vectorize an empty batch")
    first = samples[0][2]
    hop, fn, fe = first.hop, first.node_dim, first.edge_dim
    feats: dict[int, np.ndarray] = {}
    weights: dict[int, float] = {}
    edges: dict[tuple[int, int], tuple[float, np.ndarray]] = {}
    for target, _, gf in samples:
        if (gf.hop, gf.node_dim, gf.edge_dim) != (hop, fn, fe):
            raise SchemaError(
                f"GraphFeature of {target} has hop={gf.hop} fn={gf.node_dim} fe={gf.edge_dim}, "
                f"batch has hop={hop} fn={fn} fe={fe}")
        for node, w in zip(gf.nodes, gf.in_weight):
            feats.setdefault(node.node_id, node.features)
            weights.setdefault(node.node_id, w)
        for e in gf.edges:
            edges.setdefault(e.key, (e.weight, e.features))
    ids = tuple(sorted(feats))
    row = {v: i for i, v in enumerate(ids)}
    keys = sorted(edges)
    dst = np.array([row[d] for d, _ in keys], dtype=np.int64)
    src = np.array([row[s] for _, s in keys], dtype=np.int64)
    w = np.array([edges[k][0] for k in keys], dtype=np.float64)
    adj = SparseAdj(dst, src, w, len(ids), presorted=True)
    X = np.stack([feats[v] for v in ids]) if fn else np.zeros((len(ids), 0))
    E = np.stack([edges[k][1] for k in keys]) if keys and fe else np.zeros((len(keys), fe))
    targets = np.array([row[t] for t, _, _ in samples], dtype=np.int64)
    batch = VectorizedBatch(adj, X, E, np.array([weights[v] for v in ids]), targets,
                            _label_array([y for _, y, _ in samples]), hop, ids)
    if hop >= 1:
        batch.pruned = prune(adj, targets, hop)
    return batch


def full_graph_batch(g: Graph, hops: int, targets: Sequence[int] | None = None,
                     labels=None) -> VectorizedBatch:
    """The whole graph as one batch (no sampling); reference for subgraph equivalence."""
    ids = g.node_ids
    row = {v: i for i, v in enumerate(ids)}
    dst = np.array([row[e.dst_id] for e in g.edges], dtype=np.int64)
    src = np.array([row[e.src_id] for e in g.edges], dtype=np.int64)
    w = np.array([e.weight for e in g.edges], dtype=np.float64)
    adj = SparseAdj(dst, src, w, len(ids), presorted=True)
    E = np.stack([e.features for e in g.edges]) if g.edges and g.edge_dim else \
        np.zeros((len(g.edges), g.edge_dim))
    targets = list(ids) if targets is None else list(targets)
    trow = np.array([row[t] for t in targets], dtype=np.int64)
    ys = _label_array([0] * len(targets) if labels is None else [labels[t] for t in targets])
    batch = VectorizedBatch(adj, g.feature_matrix(), E,
                            np.array([g.in_weight(v) for v in ids]), trow, ys, hops, ids)
    if hops >= 1:
        batch.pruned = prune(adj, trow, hops)
    return batch
