"""Attributed directed graphs: tables, validation, canonical text forms.

Node table rows are ``<id>\\t<f1>...\\t<fn>``; edge table rows are
``<src>\\t<dst>\\t<weight>\\t<f1>...\\t<fe>``.  An edge ``src -> dst`` means
``src`` is an in-edge neighbor of ``dst``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DanglingEdge,
    DuplicateNode,
    EmptySpec,
    InvalidWeight,
    ParseError,
    SchemaError,
)


def fmt_float(x) -> str:
    """Shortest round-tripping decimal form; ``-0.0`` is folded into ``0.0``."""
    x = float(x)
    if x == 0.0:
        return "0.0"
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {x!r} cannot be serialized")
    return repr(x)


def fmt_sparse(values: np.ndarray) -> list[str]:
    """``idx:value`` tokens for the nonzero entries, ascending index."""
    nz = np.flatnonzero(values)
    return [f"{i}:{fmt_float(values[i])}" for i in nz]


def parse_sparse(tokens: Sequence[str], dim: int) -> np.ndarray:
    out = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        i, _, v = tok.partition(":")
        out[int(i)] = float(v)
    return out


def _as_vector(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    arr.setflags(write=False)
    return arr


class NodeRecord:
    __slots__ = ("node_id", "features")

    def __init__(self, node_id: int, features=()):
        if node_id < 0:
            raise SchemaError(f"node id must be non-negative, got {node_id}")
        self.node_id = int(node_id)
        self.features = _as_vector(features)

    def __eq__(self, other):
        return (isinstance(other, NodeRecord) and self.node_id == other.node_id
                and np.array_equal(self.features, other.features))

    def __hash__(self):
        return hash(self.node_id)

    def __repr__(self):
        return f"NodeRecord({self.node_id}, {self.features.tolist()})"


class EdgeRecord:
    __slots__ = ("src_id", "dst_id", "weight", "features")

    def __init__(self, src_id: int, dst_id: int, weight: float = 1.0, features=()):
        self.src_id = int(src_id)
        self.dst_id = int(dst_id)
        self.weight = float(weight)
        self.features = _as_vector(features)

    @property
    def key(self) -> tuple[int, int]:
        """Canonical sort key: destination first."""
        return (self.dst_id, self.src_id)

    def reversed(self) -> "EdgeRecord":
        return EdgeRecord(self.dst_id, self.src_id, self.weight, self.features)

    def __eq__(self, other):
        return (isinstance(other, EdgeRecord) and self.key == other.key
                and self.weight == other.weight
                and np.array_equal(self.features, other.features))

    def __hash__(self):
        return hash(self.key)

    def __repr__(self):
        return (f"EdgeRecord({self.src_id}, {self.dst_id}, {self.weight}, "
                f"{self.features.tolist()})")


class Graph:
    """Immutable directed weighted attributed graph.

    ``in_adj[v]`` lists v's in-edges sorted by source id; ``out_adj[v]`` lists
    the destinations of v's out-edges, ascending.
    """

    def __init__(self, nodes: Iterable[NodeRecord], edges: Iterable[EdgeRecord],
                 node_dim: int | None = None, edge_dim: int | None = None):
        nodes = list(nodes)
        edges = list(edges)
        by_id: dict[int, NodeRecord] = {}
        for rec in nodes:
            if rec.node_id in by_id:
                raise DuplicateNode(rec.node_id)
            by_id[rec.node_id] = rec
        if node_dim is None:
            node_dim = nodes[0].features.size if nodes else 0
        if edge_dim is None:
            edge_dim = edges[0].features.size if edges else 0
        for rec in nodes:
            if rec.features.size != node_dim:
                raise SchemaError(
                    f"node {rec.node_id} has {rec.features.size} features, expected {node_dim}")

        self.node_dim = node_dim
        self.edge_dim = edge_dim
        self.node_ids: tuple[int, ...] = tuple(sorted(by_id))
        self.nodes: dict[int, NodeRecord] = {i: by_id[i] for i in self.node_ids}

        seen = set()
        for e in edges:
            if e.src_id not in by_id or e.dst_id not in by_id:
                raise DanglingEdge(e.src_id, e.dst_id)
            if not e.weight > 0 or not math.isfinite(e.weight):
                raise InvalidWeight(f"edge {e.src_id}->{e.dst_id} has weight {e.weight}")
            if e.features.size != edge_dim:
                raise SchemaError(
                    f"edge {e.src_id}->{e.dst_id} has {e.features.size} features, "
                    f"expected {edge_dim}")
            if e.key in seen:
                raise SchemaError(f"duplicate edge {e.src_id}->{e.dst_id}")
            seen.add(e.key)
        self.edges: tuple[EdgeRecord, ...] = tuple(sorted(edges, key=lambda e: e.key))

        in_adj: dict[int, list[EdgeRecord]] = {i: [] for i in self.node_ids}
        out_adj: dict[int, list[int]] = {i: [] for i in self.node_ids}
        for e in self.edges:  # (dst, src) order keeps each in-list sorted by src
            in_adj[e.dst_id].append(e)
            out_adj[e.src_id].append(e.dst_id)
        self.in_adj = {v: tuple(es) for v, es in in_adj.items()}
        self.out_adj = {v: tuple(sorted(ds)) for v, ds in out_adj.items()}
        self._in_weight = {v: math.fsum(e.weight for e in es) for v, es in self.in_adj.items()}

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def in_weight(self, v: int) -> float:
        """Sum of in-edge weights of ``v`` (its weighted in-degree)."""
        return self._in_weight[v]

    def in_degree(self, v: int) -> int:
        return len(self.in_adj[v])

    def feature_matrix(self, ids: Sequence[int] | None = None) -> np.ndarray:
        ids = self.node_ids if ids is None else ids
        if not ids:
            return np.zeros((0, self.node_dim))
        return np.stack([self.nodes[i].features for i in ids])

    def __eq__(self, other):
        return (isinstance(other, Graph) and self.node_dim == other.node_dim
                and self.edge_dim == other.edge_dim
                and list(self.nodes.values()) == list(other.nodes.values())
                and self.edges == other.edges)

    def __repr__(self):
        return f"Graph(n={self.num_nodes}, m={self.num_edges}, fn={self.node_dim}, fe={self.edge_dim})"


# ---------------------------------------------------------------------------
# tables

def _rows(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            yield lineno, line.split("\t")


def _parse_int(tok, lineno):
    try:
        val = int(tok)
    except ValueError:
        raise ParseError(lineno, f"bad id {tok!r}") from None
    if val < 0:
        raise ParseError(lineno, f"negative id {val}")
    return val


def _parse_floats(toks, lineno):
    try:
        return [float(t) for t in toks]
    except ValueError:
        raise ParseError(lineno, f"bad number in {toks!r}") from None


def load_node_table(path, dim: int) -> list[NodeRecord]:
    records = []
    seen = set()
    for lineno, toks in _rows(path):
        if len(toks) != dim + 1:
            raise SchemaError(f"line {lineno}: expected {dim + 1} fields, got {len(toks)}")
        node_id = _parse_int(toks[0], lineno)
        if node_id in seen:
            raise DuplicateNode(node_id)
        seen.add(node_id)
        records.append(NodeRecord(node_id, _parse_floats(toks[1:], lineno)))
    return records


def load_edge_table(path, dim: int, nodes) -> list[EdgeRecord]:
    nodes = set(nodes)
    records = []
    for lineno, toks in _rows(path):
        if len(toks) != dim + 3:
            raise SchemaError(f"line {lineno}: expected {dim + 3} fields, got {len(toks)}")
        src = _parse_int(toks[0], lineno)
        dst = _parse_int(toks[1], lineno)
        weight, *feats = _parse_floats(toks[2:], lineno)
        if src not in nodes or dst not in nodes:
            raise DanglingEdge(src, dst)
        if not weight > 0:
            raise InvalidWeight(f"line {lineno}: weight {weight} must be positive")
        records.append(EdgeRecord(src, dst, weight, feats))
    return records


def _first_arity(path) -> int | None:
    for _, toks in _rows(path):
        return len(toks)
    return None


def load_graph(node_path, edge_path, node_dim: int | None = None,
               edge_dim: int | None = None) -> Graph:
    """Load both tables; dimensions default to the arity of the first row."""
    if node_dim is None:
        arity = _first_arity(node_path)
        node_dim = 0 if arity is None else arity - 1
    if edge_dim is None:
        arity = _first_arity(edge_path)
        edge_dim = 0 if arity is None else arity - 3
    nodes = load_node_table(node_path, node_dim)
    edges = load_edge_table(edge_path, edge_dim, (n.node_id for n in nodes))
    return Graph(nodes, edges, node_dim, edge_dim)


def node_table_text(g: Graph) -> str:
    return "".join(
        "\t".join([str(v), *map(fmt_float, g.nodes[v].features)]) + "\n" for v in g.node_ids)


def edge_table_text(g: Graph) -> str:
    return "".join(
        "\t".join([str(e.src_id), str(e.dst_id), fmt_float(e.weight),
                   *map(fmt_float, e.features)]) + "\n"
        for e in g.edges)


def write_graph(g: Graph, node_path, edge_path) -> None:
    Path(node_path).write_text(node_table_text(g), encoding="utf-8")
    Path(edge_path).write_text(edge_table_text(g), encoding="utf-8")


# ---------------------------------------------------------------------------
# transformations and generators

def symmetrize(g: Graph) -> Graph:
    """Add the reverse of every edge (same weight and features) where missing."""
    present = {e.key for e in g.edges}
    extra = [e.reversed() for e in g.edges if (e.src_id, e.dst_id) not in present]
    if not extra:
        return g
    return Graph(g.nodes.values(), [*g.edges, *extra], g.node_dim, g.edge_dim)


def toy_graph() -> Graph:
    """The four-node chain 3 -> 2 -> 1 -> 0 with features [1], [2], [3], [4]."""
    nodes = [NodeRecord(i, [float(i + 1)]) for i in range(4)]
    edges = [EdgeRecord(i + 1, i, 1.0) for i in range(3)]
    return Graph(nodes, edges, 1, 0)


MODELS = ("path", "star", "power_law", "random", "planted")


@dataclass
class SyntheticSpec:
    n: int
    model: str = "path"
    seed: int = 0
    node_dim: int = 1
    edge_dim: int = 0
    avg_degree: float = 3.0
    classes: int = 2
    weighted: bool = False
    labels: dict = field(default_factory=dict, repr=False)


def generate_synthetic(spec: SyntheticSpec) -> Graph:
    """Deterministic graph fixtures.

    ``path`` points i+1 -> i; ``star`` points every leaf at hub 0;
    ``power_law`` grows by preferential attachment on in-degree; ``random`` is
    a directed G(n, p); ``planted`` is a symmetric two-level block model whose
    node features carry a noisy class signal (class labels are written into
    ``spec.labels``).
    """
    if spec.n < 1:
        raise EmptySpec("graph needs at least one node")
    if spec.model not in MODELS:
        raise SchemaError(f"unknown synthetic model {spec.model!r}")
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    pairs: list[tuple[int, int]] = []

    if spec.model == "path":
        pairs = [(i + 1, i) for i in range(n - 1)]
    elif spec.model == "star":
        pairs = [(i, 0) for i in range(1, n)]
    elif spec.model == "power_law":
        m = 3
        indeg = np.zeros(n)
        chosen = set()
        for i in range(1, n):
            k = min(m, i)
            p = indeg[:i] + 1.0
            targets = rng.choice(i, size=k, replace=False, p=p / p.sum())
            for t in sorted(int(t) for t in targets):
                if (i, t) not in chosen:
                    chosen.add((i, t))
                    pairs.append((i, t))
                    indeg[t] += 1
    elif spec.model == "random":
        p = min(1.0, spec.avg_degree / max(n - 1, 1))
        mask = rng.random((n, n)) < p
        np.fill_diagonal(mask, False)
        pairs = [(int(u), int(v)) for u, v in zip(*np.nonzero(mask))]
    elif spec.model == "planted":
        classes = np.arange(n) % spec.classes
        rng.shuffle(classes)
        p_in = min(1.0, spec.avg_degree * 0.8 / max(n / spec.classes - 1, 1))
        p_out = min(1.0, spec.avg_degree * 0.2 / max(n - n / spec.classes, 1))
        upper = np.triu(rng.random((n, n)), 1)
        same = classes[:, None] == classes[None, :]
        mask = (upper > 0) & (upper < np.where(same, p_in, p_out))
        for u, v in zip(*np.nonzero(mask)):
            pairs += [(int(u), int(v)), (int(v), int(u))]
        spec.labels = {i: int(c) for i, c in enumerate(classes)}

    feats = rng.normal(size=(n, spec.node_dim))
    if spec.model == "planted" and spec.node_dim:
        for i, c in spec.labels.items():
            feats[i, c % spec.node_dim] += 1.0
    nodes = [NodeRecord(i, feats[i]) for i in range(n)]
    weights = rng.uniform(0.5, 2.0, size=len(pairs)) if spec.weighted else np.ones(len(pairs))
    efeats = rng.normal(size=(len(pairs), spec.edge_dim))
    edges = [EdgeRecord(u, v, w, f) for (u, v), w, f in zip(pairs, weights, efeats)]
    return Graph(nodes, edges, spec.node_dim, spec.edge_dim)


# ---------------------------------------------------------------------------
# GraphFeature

@dataclass(frozen=True, eq=False)
class GraphFeature:
    """A target node's k-hop neighborhood in canonical order.

    ``in_weight[i]`` is the full-graph weighted in-degree of ``nodes[i]``;
    it is carried so degree-normalized layers give the same answer on the
    subgraph as on the whole graph.
    """
    target_id: int
    hop: int
    nodes: tuple[NodeRecord, ...]
    in_weight: tuple[float, ...]
    edges: tuple[EdgeRecord, ...]
    node_dim: int
    edge_dim: int

    @property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(n.node_id for n in self.nodes)

    def to_text(self) -> str:
        return gf_text(self.target_id, self.hop, self.node_dim, self.edge_dim,
                       [node_line(n, w) for n, w in zip(self.nodes, self.in_weight)],
                       [edge_line(e) for e in self.edges])

    def __eq__(self, other):
        return isinstance(other, GraphFeature) and self.to_text() == other.to_text()

    def __hash__(self):
        return hash(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "GraphFeature":
        lines = text.rstrip("\n").split("\n")
        head = lines[0].split(" ")
        if head[:2] != ["GF", "v1"]:
            raise SchemaError(f"not a GraphFeature record: {lines[0][:40]!r}")
        try:
            meta = dict(tok.split("=", 1) for tok in head[2:])
            target, hop = int(meta["target"]), int(meta["hop"])
            n, m = int(meta["n"]), int(meta["m"])
            fn, fe = int(meta["fn"]), int(meta["fe"])
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"bad GraphFeature header {lines[0]!r}") from exc
        if len(lines) != 1 + n + m:
            raise SchemaError(f"GraphFeature declares {n}+{m} lines, found {len(lines) - 1}")
        nodes, weights, edges = [], [], []
        for line in lines[1:1 + n]:
            toks = line.split("\t")
            nodes.append(NodeRecord(int(toks[0]), parse_sparse(toks[2:], fn)))
            weights.append(float(toks[1]))
        for line in lines[1 + n:]:
            toks = line.split("\t")
            edges.append(EdgeRecord(int(toks[0]), int(toks[1]), float(toks[2]),
                                    parse_sparse(toks[3:], fe)))
        return cls(target, hop, tuple(nodes), tuple(weights), tuple(edges), fn, fe)


def node_line(node: NodeRecord, in_weight: float) -> str:
    return "\t".join([str(node.node_id), fmt_float(in_weight), *fmt_sparse(node.features)])


def edge_line(e: EdgeRecord) -> str:
    return "\t".join([str(e.src_id), str(e.dst_id), fmt_float(e.weight), *fmt_sparse(e.features)])


def gf_text(target: int, hop: int, node_dim: int, edge_dim: int,
            node_lines: Sequence[str], edge_lines: Sequence[str]) -> str:
    """Assemble a record from already-canonical, already-sorted lines."""
    head = (f"GF v1 target={target} hop={hop} n={len(node_lines)} m={len(edge_lines)} "
            f"fn={node_dim} fe={edge_dim}")
    return "\n".join([head, *node_lines, *edge_lines]) + "\n"


# ---------------------------------------------------------------------------
# training-sample triples: <target>\t<label>\t<GraphFeature with '\n' -> '|'>

def format_label(label) -> str:
    if isinstance(label, (list, tuple, np.ndarray)):
        return ",".join(str(int(x)) for x in label)
    return str(int(label))


def parse_label(tok: str):
    if "," in tok:
        return tuple(int(x) for x in tok.split(","))
    return int(tok)


def triple_line(target: int, label, gf: GraphFeature | str) -> str:
    text = gf if isinstance(gf, str) else gf.to_text()
    return f"{target}\t{format_label(label)}\t{text.rstrip(chr(10)).replace(chr(10), '|')}\n"


def parse_triple(line: str) -> tuple[int, object, GraphFeature]:
    target, label, record = line.rstrip("\n").split("\t", 2)
    gf = GraphFeature.from_text(record.replace("|", "\n"))
    if gf.target_id != int(target):
        raise SchemaError(f"triple target {target} disagrees with record target {gf.target_id}")
    return int(target), parse_label(label), gf


def write_triples(path, triples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t, y, gf in triples:
            fh.write(triple_line(t, y, gf))


def read_triples(path) -> list[tuple[int, object, GraphFeature]]:
    with open(path, encoding="utf-8") as fh:
        return [parse_triple(line) for line in fh if line.strip()]
