"""Citation-graph loading (Cora) into a :class:`Graph` with labels and splits.

Two on-disk layouts are understood:

* the Planetoid files ``ind.cora.{x,y,tx,ty,allx,ally,graph,test.index}``,
  which also fix the usual 140 / 500 / 1000 split;
* the original ``cora.content`` / ``cora.cites`` tables, for which a split of
  the same shape (20 per class, 500, 1000) is drawn with a seed.

Citations are made bidirectional and node features are row-normalized.
"""
from __future__ import annotations

import os
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, SchemaError
from .graph_store import EdgeRecord, Graph, NodeRecord, symmetrize
from .graphflat import NO_SAMPLING, SamplingStrategy, build_graphfeatures

ENV_VAR = "CORA_DIR"
DEFAULT_DIRS = ("data/cora", "~/.cache/hoplearn/cora")


@dataclass
class LabeledGraph:
    graph: Graph
    labels: dict[int, int]
    train: list[int]
    val: list[int]
    test: list[int]
    classes: int


class DatasetMissing(InputError):
    pass


def find_cora(path=None) -> Path:
    candidates = [path] if path else [os.environ.get(ENV_VAR), *DEFAULT_DIRS]
    for c in candidates:
        if not c:
            continue
        p = Path(c).expanduser()
        if (p / "ind.cora.graph").exists() or (p / "cora.content").exists():
            return p
    raise DatasetMissing(
        f"Cora not found; set {ENV_VAR} to a directory holding ind.cora.* or cora.content/cora.cites")


def load_cora(path=None, seed: int = 0) -> LabeledGraph:
    root = find_cora(path)
    if (root / "ind.cora.graph").exists():
        return _load_planetoid(root)
    return _load_linqs(root, seed)


def _row_normalize(X: np.ndarray) -> np.ndarray:
    s = X.sum(axis=1, keepdims=True)
    return X / np.where(s == 0, 1.0, s)


def _build(X: np.ndarray, pairs, labels: np.ndarray, train, val, test) -> LabeledGraph:
    X = _row_normalize(np.asarray(X, dtype=np.float64))
    nodes = [NodeRecord(i, X[i]) for i in range(X.shape[0])]
    uniq = sorted({(int(u), int(v)) for u, v in pairs if u != v})
    g = symmetrize(Graph(nodes, [EdgeRecord(u, v) for u, v in uniq], X.shape[1], 0))
    return LabeledGraph(g, {i: int(c) for i, c in enumerate(labels)},
                        sorted(train), sorted(val), sorted(test), int(labels.max()) + 1)


def _load_planetoid(root: Path) -> LabeledGraph:
    def obj(name):
        with open(root / f"ind.cora.{name}", "rb") as fh:
            return pickle.load(fh, encoding="latin1")

    def dense(m):
        return m.toarray() if hasattr(m, "toarray") else np.asarray(m)

    x, y, tx, ty, allx, ally, graph = (obj(n) for n in ("x", "y", "tx", "ty", "allx", "ally", "graph"))
    test_idx = [int(t) for t in (root / "ind.cora.test.index").read_text().split()]
    X = np.vstack([dense(allx), dense(tx)])
    Y = np.vstack([ally, ty])
    order = np.sort(test_idx)
    X[test_idx] = X[order]
    Y[test_idx] = Y[order]
    labels = Y.argmax(axis=1)
    pairs = [(u, v) for u, nbrs in graph.items() for v in nbrs]
    n_train = np.asarray(y).shape[0]
    return _build(X, pairs, labels, range(n_train), range(n_train, n_train + 500), test_idx)


def _load_linqs(root: Path, seed: int) -> LabeledGraph:
    paper_ids, rows, names = [], [], []
    with open(root / "cora.content", encoding="utf-8") as fh:
        for line in fh:
            toks = line.split()
            if toks:
                paper_ids.append(toks[0])
                rows.append([float(t) for t in toks[1:-1]])
                names.append(toks[-1])
    if not rows or len({len(r) for r in rows}) != 1:
        raise SchemaError("cora.content rows must share one feature width")
    index = {p: i for i, p in enumerate(paper_ids)}
    classes = sorted(set(names))
    labels = np.array([classes.index(c) for c in names])
    pairs = []
    with open(root / "cora.cites", encoding="utf-8") as fh:
        for line in fh:
            toks = line.split()
            if len(toks) == 2 and toks[0] in index and toks[1] in index:
                # "cited citing": the citing paper points at the cited one
                pairs.append((index[toks[1]], index[toks[0]]))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(labels))
    train = []
    for c in range(len(classes)):
        train += [int(i) for i in perm if labels[i] == c][:20]
    chosen = set(train)
    rest = [int(i) for i in perm if i not in chosen]
    return _build(np.array(rows), pairs, labels, train, rest[:500], rest[500:1500])


def split_triples(lg: LabeledGraph, hops: int, sampling: SamplingStrategy = NO_SAMPLING,
                  workers: int = 1) -> dict[str, list]:
    """``(target, label, GraphFeature)`` triples for the train / val / test splits."""
    wanted = set(lg.train) | set(lg.val) | set(lg.test)
    gfs = build_graphfeatures(lg.graph, wanted, hops, sampling, workers=workers)
    return {name: [(v, lg.labels[v], gfs[v]) for v in ids]
            for name, ids in (("train", lg.train), ("val", lg.val), ("test", lg.test))}
