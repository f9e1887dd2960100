"""k-hop neighborhood generation by repeated merge-and-propagate.

Shuffle values are tagged byte strings:

``S`` SelfInfo
    the key node's accumulated partial neighborhood;
``I`` InEdgeInfo
    a source node's partial neighborhood plus the connecting edge;
``O`` OutEdgeInfo
    routing to one out-edge destination, unchanged between rounds.

A partial neighborhood is a set of node lines and edge lines in the
GraphFeature text format, so merging is a dictionary union.  Without
sampling, every node line travels with all of that node's in-edge lines;
finalization keeps the edges whose two endpoints both made it into the node
set, which is exactly the induced subgraph.  With sampling, only the
connecting edges selected by the sampler are kept.
"""
from __future__ import annotations

import logging
import math
import tempfile
from dataclasses import dataclass
from functools import partial
from typing import Iterable, Sequence

import numpy as np

from . import mr_engine
from .errors import MalformedGroup, SchemaError, UnknownTarget
from .graph_store import Graph, GraphFeature, edge_line, gf_text, node_line
from .mr_engine import KeyedRecord, ShuffleKey

log = logging.getLogger(__name__)

SELF, IN_EDGE, OUT_EDGE = b"S", b"I", b"O"


@dataclass(frozen=True)
class SamplingStrategy:
    kind: str = "none"          # none | uniform | weighted
    fanout: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "uniform", "weighted"):
            raise SchemaError(f"unknown sampling kind {self.kind!r}")
        if self.kind != "none" and self.fanout < 1:
            raise SchemaError("sampling fanout must be >= 1")

    @property
    def enabled(self) -> bool:
        return self.kind != "none"

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "SamplingStrategy":
        """``none``, ``uniform:F`` or ``weighted:F``."""
        kind, _, fan = text.partition(":")
        try:
            return cls(kind, int(fan) if fan else 0, seed)
        except ValueError:
            raise SchemaError(f"bad sampling strategy {text!r}") from None

    def __str__(self):
        return self.kind if not self.enabled else f"{self.kind}:{self.fanout}"


NO_SAMPLING = SamplingStrategy()


@dataclass(frozen=True)
class ReindexConfig:
    threshold: float = 1000
    suffixes: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.threshold < 1:
            raise SchemaError("re-index threshold must be >= 1")
        if self.suffixes < 1:
            raise SchemaError("suffix count must be >= 1")


NO_REINDEX = ReindexConfig(threshold=math.inf)


def _mix(*ints: int) -> int:
    """Stable 64-bit integer hash (splitmix64 chain)."""
    h = 0x9E3779B97F4A7C15
    for x in ints:
        h = (h ^ (x & 0xFFFFFFFFFFFFFFFF)) * 0xBF58476D1CE4E5B9 & 0xFFFFFFFFFFFFFFFF
        h = (h ^ (h >> 31)) * 0x94D049BB133111EB & 0xFFFFFFFFFFFFFFFF
        h ^= h >> 29
    return h


def select_in_edges(candidates: Sequence, weights: Sequence[float], k: int,
                    sampling: SamplingStrategy, key: int, salt: int = 0) -> list[int]:
    """Indices (ascending) of the in-edge records kept for ``key``.

    ``candidates`` must be in source-id order.  The draw depends only on the
    seed, the key and the candidate set, so a node keeps the same in-edges in
    every round and in every pipeline (flattening and inference) that uses the
    same strategy.
    """
    n = len(candidates)
    if not sampling.enabled or n <= k:
        return list(range(n))
    rng = np.random.default_rng([sampling.seed & 0xFFFFFFFF, key, salt])
    if sampling.kind == "uniform":
        chosen = rng.permutation(n)[:k]
    else:
        w = np.asarray(weights, dtype=np.float64)
        # Efraimidis-Spirakis: top-k of u^(1/w) is weighted sampling without replacement
        score = np.log(rng.random(n)) / w
        chosen = np.argsort(-score, kind="stable")[:k]
    return sorted(int(i) for i in chosen)


def choose_in_edges(v: int, ins: Sequence[tuple[int, float]], sampling: SamplingStrategy,
                    reindex: ReindexConfig) -> list[tuple[int, list[int]]]:
    """Which in-edge records node ``v`` merges, grouped by shuffle sub-key.

    ``ins`` holds ``(source id, weight)`` sorted by source.  Returns
    ``(suffix, indices into ins)`` pairs; suffix 0 means no re-indexing.
    Above the re-index threshold the records are spread over ``suffixes``
    sub-keys, each sampling its share of the fanout, and the union is
    trimmed back to the fanout.
    """
    if len(ins) <= reindex.threshold:
        return [(0, select_in_edges(ins, [w for _, w in ins], sampling.fanout, sampling, v))]
    s = reindex.suffixes
    subs: dict[int, list[int]] = {}
    for i, (src, _) in enumerate(ins):
        subs.setdefault(1 + _mix(reindex.seed, v, src) % s, []).append(i)
    share = math.ceil(sampling.fanout / s) if sampling.enabled else 0
    kept = {}
    for suffix in sorted(subs):
        group = subs[suffix]
        idx = select_in_edges(group, [ins[i][1] for i in group], share, sampling, v, salt=suffix)
        kept[suffix] = [group[i] for i in idx]
    total = sorted(i for suffix in kept for i in kept[suffix])
    if sampling.enabled and len(total) > sampling.fanout:
        idx = select_in_edges(total, [ins[i][1] for i in total], sampling.fanout,
                              sampling, v, salt=0)
        survivors = {total[i] for i in idx}
        kept = {k: [i for i in rs if i in survivors] for k, rs in kept.items()}
    return [(suffix, kept[suffix]) for suffix in sorted(kept)]


# ---------------------------------------------------------------------------
# partial neighborhoods

class Partial:
    """Node lines by id, edge lines by (dst, src)."""
    __slots__ = ("nodes", "edges")

    def __init__(self, nodes=None, edges=None):
        self.nodes: dict[int, str] = nodes if nodes is not None else {}
        self.edges: dict[tuple[int, int], str] = edges if edges is not None else {}

    def update(self, other: "Partial") -> None:
        self.nodes.update(other.nodes)
        self.edges.update(other.edges)

    def add_edge(self, line: str) -> None:
        src, dst, _ = line.split("\t", 2)
        self.edges[(int(dst), int(src))] = line

    def encode(self) -> bytes:
        parts = [f"{len(self.nodes)} {len(self.edges)}\n"]
        parts += [self.nodes[k] + "\n" for k in sorted(self.nodes)]
        parts += [self.edges[k] + "\n" for k in sorted(self.edges)]
        return "".join(parts).encode()

    @classmethod
    def decode(cls, data: bytes) -> "Partial":
        lines = data.decode().split("\n")
        n, m = map(int, lines[0].split(" "))
        nodes = {int(line.split("\t", 1)[0]): line for line in lines[1:1 + n]}
        edges = {}
        for line in lines[1 + n:1 + n + m]:
            src, dst, _ = line.split("\t", 2)
            edges[(int(dst), int(src))] = line
        return cls(nodes, edges)

    def finalize(self, target: int, hop: int, node_dim: int, edge_dim: int) -> str:
        """Canonical GraphFeature text, keeping edges internal to the node set."""
        ids = self.nodes
        edge_lines = [self.edges[k] for k in sorted(self.edges) if k[0] in ids and k[1] in ids]
        return gf_text(target, hop, node_dim, edge_dim,
                       [ids[k] for k in sorted(ids)], edge_lines)


def _self_info(p: Partial) -> bytes:
    return SELF + p.encode()


def _in_edge_info(src: int, line: str, p: Partial) -> bytes:
    return IN_EDGE + f"{src}\t{line}\n".encode() + p.encode()


def _out_edge_info(dst: int, line: str) -> bytes:
    return OUT_EDGE + f"{dst}\t{line}\n".encode()


def _split_head(value: bytes) -> tuple[int, str, bytes]:
    head, _, rest = value[1:].partition(b"\n")
    node, _, line = head.decode().partition("\t")
    return int(node), line, rest


# ---------------------------------------------------------------------------
# map

class _Lines:
    """Canonical text lines of a graph, computed once."""

    def __init__(self, g: Graph):
        self.node = {v: node_line(g.nodes[v], g.in_weight(v)) for v in g.node_ids}
        self.edge = {e.key: edge_line(e) for e in g.edges}
        self.in_edges = {v: [self.edge[e.key] for e in g.in_adj[v]] for v in g.node_ids}


def _zero_hop(lines: _Lines, v: int, sampling: SamplingStrategy) -> Partial:
    p = Partial({v: lines.node[v]})
    if not sampling.enabled:
        for line in lines.in_edges[v]:
            p.add_edge(line)
    return p


def _map_record(record, lines: _Lines, sampling: SamplingStrategy) -> list[KeyedRecord]:
    kind, obj = record
    if kind == "node":
        return [KeyedRecord(ShuffleKey(obj), _self_info(_zero_hop(lines, obj, sampling)))]
    src, dst = obj.src_id, obj.dst_id
    line = lines.edge[obj.key]
    return [
        KeyedRecord(ShuffleKey(dst), _in_edge_info(src, line, _zero_hop(lines, src, sampling))),
        KeyedRecord(ShuffleKey(src), _out_edge_info(dst, line)),
    ]


def _map_inputs(g: Graph) -> list:
    return [("node", v) for v in g.node_ids] + [("edge", e) for e in g.edges]


def flat_map(g: Graph, sampling: SamplingStrategy = NO_SAMPLING) -> list[KeyedRecord]:
    """Initial shuffle records: SelfInfo per node; InEdgeInfo and OutEdgeInfo per edge."""
    lines = _Lines(g)
    out = []
    for rec in _map_inputs(g):
        out.extend(_map_record(rec, lines, sampling))
    return out


# ---------------------------------------------------------------------------
# reduce

def _edge_weight(line: str) -> float:
    return float(line.split("\t", 3)[2])


def flat_reduce(key: ShuffleKey, values: list[bytes],
                sampling: SamplingStrategy = NO_SAMPLING,
                reindex: ReindexConfig = NO_REINDEX,
                propagate: bool = True) -> list[KeyedRecord]:
    """Merge in-edge neighborhoods into the key's own, then send it along out-edges."""
    v = key.node_id
    selfs = [x for x in values if x[:1] == SELF]
    if len(selfs) != 1:
        raise MalformedGroup(f"key {v}: expected one SelfInfo, found {len(selfs)}")
    merged = Partial.decode(selfs[0][1:])
    ins = sorted((_split_head(x) for x in values if x[:1] == IN_EDGE), key=lambda r: r[0])
    outs = [x for x in values if x[:1] == OUT_EDGE]

    for suffix, picked in choose_in_edges(v, [(r[0], _edge_weight(r[1])) for r in ins],
                                          sampling, reindex):
        # partial merge per sub-key, then inverted indexing back onto the original key
        piece = Partial()
        for i in picked:
            _, line, payload = ins[i]
            piece.update(Partial.decode(payload))
            piece.add_edge(line)
        merged.update(piece)

    encoded = merged.encode()
    out = [KeyedRecord(key, SELF + encoded)]
    if propagate:
        for x in outs:
            dst, line, _ = _split_head(x)
            out.append(KeyedRecord(ShuffleKey(dst),
                                   IN_EDGE + f"{v}\t{line}\n".encode() + encoded))
        out.extend(KeyedRecord(key, x) for x in outs)
    return out


# ---------------------------------------------------------------------------
# driver

def graphfeature_texts(g: Graph, targets: Iterable[int] | None, hops: int,
                       sampling: SamplingStrategy = NO_SAMPLING,
                       reindex: ReindexConfig = NO_REINDEX,
                       workers: int = 1, workdir=None) -> dict[int, str]:
    """Canonical GraphFeature text per target, computed over the MapReduce engine."""
    if hops < 0:
        raise ValueError("hops must be >= 0")
    targets = list(g.node_ids) if targets is None else sorted(set(targets))
    for t in targets:
        if t not in g.nodes:
            raise UnknownTarget(t)
    lines = _Lines(g)
    reducers = [partial(flat_reduce, sampling=sampling, reindex=reindex,
                        propagate=r < hops - 1) for r in range(hops)]
    mapper = partial(_map_record, lines=lines, sampling=sampling)
    with tempfile.TemporaryDirectory(prefix="graphflat-") as tmp:
        ckpt = mr_engine.run_job(_map_inputs(g), mapper, reducers, hops, workers,
                                 workdir if workdir is not None else tmp)
        wanted = set(targets)
        out = {}
        for rec in ckpt.records():
            v = rec.key.node_id
            if v in wanted and rec.value[:1] == SELF:
                out[v] = Partial.decode(rec.value[1:]).finalize(v, hops, g.node_dim, g.edge_dim)
    return out


def build_graphfeatures(g: Graph, targets: Iterable[int] | None, hops: int,
                        sampling: SamplingStrategy = NO_SAMPLING,
                        reindex: ReindexConfig = NO_REINDEX,
                        workers: int = 1, workdir=None) -> dict[int, GraphFeature]:
    texts = graphfeature_texts(g, targets, hops, sampling, reindex, workers, workdir)
    return {t: GraphFeature.from_text(x) for t, x in texts.items()}


def khop_nodes(g: Graph, v: int, hops: int) -> dict[int, int]:
    """Reverse BFS along in-edges: node -> distance to ``v`` (at most ``hops``)."""
    dist = {v: 0}
    frontier = [v]
    for d in range(1, hops + 1):
        nxt = []
        for b in frontier:
            for e in g.in_adj[b]:
                if e.src_id not in dist:
                    dist[e.src_id] = d
                    nxt.append(e.src_id)
        frontier = nxt
    return dist


def khop_oracle_text(g: Graph, v: int, hops: int) -> str:
    if v not in g.nodes:
        raise UnknownTarget(v)
    members = sorted(khop_nodes(g, v, hops))
    inside = set(members)
    edges = [e for b in members for e in g.in_adj[b] if e.src_id in inside]
    edges.sort(key=lambda e: e.key)
    return gf_text(v, hops, g.node_dim, g.edge_dim,
                   [node_line(g.nodes[u], g.in_weight(u)) for u in members],
                   [edge_line(e) for e in edges])


def khop_oracle(g: Graph, v: int, hops: int) -> GraphFeature:
    """Induced k-hop neighborhood by brute-force BFS; the reference for testing."""
    return GraphFeature.from_text(khop_oracle_text(g, v, hops))
