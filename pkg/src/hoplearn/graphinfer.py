"""Whole-graph inference with one model slice per MapReduce round.

Round ``k`` (1..K) gives every node its layer-k embedding from its own and
its in-neighbors' layer-(k-1) embeddings, then ships the result along the
out-edges.  Round K+1 applies the prediction head.  Each embedding is
computed once, unlike per-target inference where overlapping neighborhoods
recompute the same nodes.

Shuffle values (tag byte, then payload):

``S`` self state: in-weight and current embedding;
``I`` in-edge message: source id, edge weight, source in-weight, source embedding;
``O`` out-edge routing: destination id;
``R`` final scores.
"""
from __future__ import annotations

import struct
import tempfile
from collections import deque
from dataclasses import dataclass
from functools import partial
from typing import Iterable, Sequence

import numpy as np

from . import mr_engine
from .errors import CheckpointError, MalformedGroup, ShapeError, UnknownTarget
from .graph_store import EdgeRecord, Graph, fmt_float
from .graphflat import (NO_REINDEX, NO_SAMPLING, ReindexConfig, SamplingStrategy,
                        build_graphfeatures, choose_in_edges)
from .gnn.batch import vectorize
from .gnn.layers import LayerParams, layer_forward
from .gnn.model import GNNModel, ModelConfig, parse_header, parse_tensors, scores
from .gnn.sparse import SparseAdj
from .mr_engine import KeyedRecord, ShuffleKey

SELF, IN_EDGE, OUT_EDGE, RESULT = b"S", b"I", b"O", b"R"
_IN_HEAD = struct.Struct(">qdd")


# ---------------------------------------------------------------------------
# model segmentation

@dataclass(frozen=True)
class ModelSlice:
    """Tensor blocks of layer ``index`` (or of the head when ``index == K``)."""
    index: int
    header: str
    text: str

    @property
    def config(self) -> ModelConfig:
        return parse_header(self.header)

    @property
    def is_head(self) -> bool:
        return self.index == self.config.hops

    def params(self) -> LayerParams:
        cfg = self.config
        dt = np.dtype(cfg.dtype)
        t = {name.split(".", 1)[1]: arr.astype(dt)
             for name, arr in parse_tensors(self.text.rstrip("\n").split("\n")).items()}
        if self.is_head:
            return LayerParams("DENSE", t["W"], t["b"])
        return LayerParams(cfg.kind, t["W"], t["b"], t.get("att_src"), t.get("att_dst"),
                           heads=cfg.heads)


def _tensor_blocks(lines: list[str]) -> list[tuple[str, list[str]]]:
    blocks, i = [], 0
    while i < len(lines):
        toks = lines[i].split(" ")
        if len(toks) != 3 or toks[0] != "T":
            raise CheckpointError(f"expected a tensor header, got {lines[i][:40]!r}")
        try:
            shape = [int(s) for s in toks[2].split(",")]
        except ValueError as exc:
            raise CheckpointError(f"bad tensor shape {toks[2]!r}") from exc
        rows = 1 if len(shape) == 1 else shape[0]
        if i + 1 + rows > len(lines):
            raise CheckpointError(f"tensor {toks[1]} is truncated")
        blocks.append((toks[1], lines[i:i + 1 + rows]))
        i += 1 + rows
    return blocks


def segment_model(checkpoint: str) -> list[ModelSlice]:
    """Split checkpoint text into K+1 slices: one per layer, then the head."""
    if not checkpoint.endswith("\n"):
        raise CheckpointError("checkpoint text must end with a newline")
    lines = checkpoint[:-1].split("\n")
    header = lines[0] + "\n"
    config = parse_header(lines[0])
    groups: dict[int, list[str]] = {k: [] for k in range(config.hops + 1)}
    for name, block in _tensor_blocks(lines[1:]):
        owner = name.split(".", 1)[0]
        if owner == "head":
            k = config.hops
        elif owner.startswith("layer") and owner[5:].isdigit() and int(owner[5:]) < config.hops:
            k = int(owner[5:])
        else:
            raise CheckpointError(f"tensor {name!r} belongs to no slice")
        groups[k] += block
    slices = [ModelSlice(k, header, "\n".join(groups[k]) + "\n" if groups[k] else "")
              for k in range(config.hops + 1)]
    for s in slices:
        try:
            s.params()
        except (KeyError, ShapeError, ValueError) as exc:
            raise CheckpointError(f"slice {s.index} is incomplete: {exc}") from exc
    return slices


def reassemble(slices: Sequence[ModelSlice]) -> str:
    if not slices:
        raise CheckpointError("no slices to reassemble")
    return slices[0].header + "".join(s.text for s in sorted(slices, key=lambda s: s.index))


# ---------------------------------------------------------------------------
# counters

@dataclass
class WorkCounter:
    aggregation_ops: int = 0   # (adjacency entries + self terms) x aggregated width
    embedding_evals: int = 0   # per-node per-layer embeddings, plus one head evaluation per node

    def add(self, other: "WorkCounter") -> None:
        self.aggregation_ops += other.aggregation_ops
        self.embedding_evals += other.embedding_evals


@dataclass
class InferenceResult:
    scores: dict[int, np.ndarray]
    counter: WorkCounter

    def to_text(self) -> str:
        return format_scores(self.scores)


def format_scores(score_map: dict[int, np.ndarray]) -> str:
    return "".join(f"{v}\t" + "\t".join(fmt_float(x) for x in score_map[v]) + "\n"
                   for v in sorted(score_map))


# ---------------------------------------------------------------------------
# map / reduce

def _vec(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.float64)


def _self_value(in_weight: float, h: np.ndarray) -> bytes:
    return SELF + struct.pack(">d", in_weight) + np.asarray(h, dtype=np.float64).tobytes()


def _in_value(src: int, weight: float, in_weight: float, h: np.ndarray) -> bytes:
    return IN_EDGE + _IN_HEAD.pack(src, weight, in_weight) + np.asarray(h, np.float64).tobytes()


def _out_value(dst: int, weight: float) -> bytes:
    return OUT_EDGE + struct.pack(">qd", dst, weight)


def _map_record(record, g: Graph, in_weight: dict[int, float]) -> list[KeyedRecord]:
    kind, obj = record
    if kind == "node":
        return [KeyedRecord(ShuffleKey(obj), _self_value(in_weight[obj], g.nodes[obj].features))]
    e: EdgeRecord = obj
    return [
        KeyedRecord(ShuffleKey(e.dst_id), _in_value(e.src_id, e.weight, in_weight[e.src_id],
                                                    g.nodes[e.src_id].features)),
        KeyedRecord(ShuffleKey(e.src_id), _out_value(e.dst_id, e.weight)),
    ]


def _parse_group(v: int, values: list[bytes]):
    selfs = [x for x in values if x[:1] == SELF]
    if len(selfs) != 1:
        raise MalformedGroup(f"key {v}: expected one self record, found {len(selfs)}")
    w_self = struct.unpack(">d", selfs[0][1:9])[0]
    h_self = _vec(selfs[0][9:])
    ins = []
    for x in values:
        if x[:1] == IN_EDGE:
            src, w, iw = _IN_HEAD.unpack_from(x, 1)
            ins.append((src, w, iw, _vec(x[1 + _IN_HEAD.size:])))
    ins.sort(key=lambda r: r[0])
    outs = [struct.unpack(">qd", x[1:]) for x in values if x[:1] == OUT_EDGE]
    return w_self, h_self, ins, outs


def apply_layer(p: LayerParams, activation: str, dtype, h_self: np.ndarray, w_self: float,
                ins: list) -> tuple[np.ndarray, int]:
    """One node's next embedding from its in-neighbor messages; also returns the op count."""
    H = np.vstack([h_self] + [r[3] for r in ins]).astype(dtype) if ins else \
        np.asarray(h_self, dtype=dtype)[None, :]
    d = len(ins)
    adj = SparseAdj(np.zeros(d, np.int64), np.arange(1, d + 1), [r[1] for r in ins], 1, d + 1,
                    presorted=True)
    in_w = np.array([w_self] + [r[2] for r in ins])
    pre, _ = layer_forward(p, adj, H, in_w)
    out = np.maximum(pre[0], 0) if activation == "relu" else pre[0]
    return out, (d + 1) * p.out_dim


def infer_reduce(key: ShuffleKey, values: list[bytes], *, round_index: int,
                 slices: Sequence[ModelSlice], sampling: SamplingStrategy,
                 reindex: ReindexConfig, counts: dict) -> list[KeyedRecord]:
    v = key.node_id
    config = slices[0].config
    K = config.hops
    w_self, h_self, ins, outs = _parse_group(v, values)
    p = _slice_params(slices, round_index - 1)
    if round_index == K + 1:
        logits = h_self.astype(p.W.dtype) @ p.W + p.b
        counts[v] = (0, 1)
        return [KeyedRecord(key, RESULT + scores(logits[None, :], config.multilabel)[0].tobytes())]
    if p.in_dim != h_self.size:
        raise ShapeError(f"slice {round_index - 1} expects width {p.in_dim}, node {v} has {h_self.size}")
    picked = sorted(i for _, idx in choose_in_edges(v, [(r[0], r[1]) for r in ins], sampling, reindex)
                    for i in idx)
    h, ops = apply_layer(p, config.activation, np.dtype(config.dtype), h_self, w_self,
                         [ins[i] for i in picked])
    counts[v] = (ops, 1)
    out = [KeyedRecord(key, _self_value(w_self, h))]
    if round_index < K:
        for dst, w in outs:
            out.append(KeyedRecord(ShuffleKey(dst), _in_value(v, w, w_self, h)))
            out.append(KeyedRecord(key, _out_value(dst, w)))
    return out


_PARAM_CACHE: dict[tuple[int, int], LayerParams] = {}


def _slice_params(slices: Sequence[ModelSlice], k: int) -> LayerParams:
    key = (id(slices), k)
    p = _PARAM_CACHE.get(key)
    if p is None:
        p = _PARAM_CACHE[key] = slices[k].params()
    return p


def _restrict(g: Graph, targets: Iterable[int], hops: int) -> Graph:
    """Nodes within ``hops`` in-edge steps of some target, with the edges among them."""
    dist = {}
    q = deque()
    for t in targets:
        if t not in g.nodes:
            raise UnknownTarget(t)
        if t not in dist:
            dist[t] = 0
            q.append(t)
    while q:
        v = q.popleft()
        if dist[v] == hops:
            continue
        for e in g.in_adj[v]:
            if e.src_id not in dist:
                dist[e.src_id] = dist[v] + 1
                q.append(e.src_id)
    keep = set(dist)
    return Graph([g.nodes[v] for v in sorted(keep)],
                 [e for e in g.edges if e.src_id in keep and e.dst_id in keep],
                 g.node_dim, g.edge_dim)


def run_inference(g: Graph, slices: Sequence[ModelSlice], workers: int = 1,
                  sampling: SamplingStrategy = NO_SAMPLING, reindex: ReindexConfig = NO_REINDEX,
                  targets: Iterable[int] | None = None, workdir=None) -> InferenceResult:
    """Scores for every node (or for ``targets``) in K+1 reduce rounds."""
    slices = list(slices)
    config = slices[0].config
    K = config.hops
    if len(slices) != K + 1:
        raise ShapeError(f"{len(slices)} slices for a K={K} model")
    if g.node_dim != config.dims[0]:
        raise ShapeError(f"model expects {config.dims[0]} node features, graph has {g.node_dim}")
    in_weight = {v: g.in_weight(v) for v in g.node_ids}   # full-graph degrees survive restriction
    work = g if targets is None else _restrict(g, list(targets), K)
    inputs = [("node", v) for v in work.node_ids] + [("edge", e) for e in work.edges]
    per_round = [dict() for _ in range(K + 1)]
    reducers = [partial(infer_reduce, round_index=r + 1, slices=slices, sampling=sampling,
                        reindex=reindex, counts=per_round[r]) for r in range(K + 1)]
    try:
        with tempfile.TemporaryDirectory(prefix="graphinfer-") as tmp:
            ckpt = mr_engine.run_job(inputs, partial(_map_record, g=work, in_weight=in_weight),
                                     reducers, K + 1, workers, workdir if workdir is not None else tmp)
            out = {rec.key.node_id: _vec(rec.value[1:]).copy() for rec in ckpt.records()
                   if rec.value[:1] == RESULT}
    finally:
        for k in range(K + 1):
            _PARAM_CACHE.pop((id(slices), k), None)
    counter = WorkCounter()
    for counts in per_round:   # summed at the round barriers
        counter.add(WorkCounter(sum(c[0] for c in counts.values()),
                                sum(c[1] for c in counts.values())))
    if targets is not None:
        wanted = set(targets)
        out = {v: s for v, s in out.items() if v in wanted}
    return InferenceResult(out, counter)


# ---------------------------------------------------------------------------
# reference: independent per-target inference on GraphFeatures

def forward_work(model: GNNModel, batch) -> WorkCounter:
    """Work done by one :meth:`GNNModel.forward` call on ``batch``."""
    c = WorkCounter()
    for k, p in enumerate(model.layers):
        adj = batch.pruned[k]
        c.aggregation_ops += (adj.nnz + adj.n_rows) * p.out_dim
        c.embedding_evals += adj.n_rows
    c.embedding_evals += len(batch.targets)
    return c


def naive_oracle(g: Graph, checkpoint: str, targets: Iterable[int] | None = None,
                 sampling: SamplingStrategy = NO_SAMPLING,
                 reindex: ReindexConfig = NO_REINDEX) -> InferenceResult:
    """Build each target's GraphFeature and run a separate forward pass for it."""
    model = GNNModel.from_text(checkpoint)
    K = model.config.hops
    gfs = build_graphfeatures(g, targets, K, sampling, reindex)
    out, counter = {}, WorkCounter()
    for t in sorted(gfs):
        batch = vectorize([(t, 0, gfs[t])])
        out[t] = model.predict(batch)[0]
        counter.add(forward_work(model, batch))
    return InferenceResult(out, counter)
