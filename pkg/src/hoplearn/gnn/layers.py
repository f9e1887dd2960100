"""GNN layers with hand-written reverse-mode gradients.

Every layer first transforms, ``Z = H @ W``, then aggregates over
``{v} + in-neighbors(v)``:

* GCN: ``sum_u a_vu / sqrt((1 + D_v)(1 + D_u)) * Z_u`` plus ``Z_v / (1 + D_v)``,
  where ``D`` is the weighted in-degree in the full graph;
* SAGE: ``Z_v + mean_u Z_u`` (the "add" combination);
* GAT: ``sum_u alpha_vu Z_u`` with ``alpha`` a softmax over
  ``LeakyReLU(att_dst . Z_v + att_src . Z_u)``, one attention per head.

Transforming before aggregating is exact for all three (aggregation is
linear in ``Z``) and keeps the sparse work at the narrow width.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from .sparse import SparseAdj, segment_sum, spmm, spmm_t

KINDS = ("GCN", "SAGE", "GAT")
LEAKY_SLOPE = 0.2


@dataclass
class LayerParams:
    kind: str
    W: np.ndarray
    b: np.ndarray
    att_src: np.ndarray | None = None   # (heads, out_per_head), GAT only
    att_dst: np.ndarray | None = None
    heads: int = 1

    def __post_init__(self):
        if self.kind not in KINDS + ("DENSE",):
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ShapeError(f"{self.kind} layer: W {self.W.shape} and b {self.b.shape} disagree")
        if self.kind == "GAT":
            want = (self.heads, self.W.shape[1] // self.heads)
            if self.W.shape[1] % self.heads or self.att_src is None or \
                    self.att_src.shape != want or self.att_dst is None or self.att_dst.shape != want:
                raise ShapeError(f"GAT layer attention vectors must have shape {want}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"W": self.W, "b": self.b}
        if self.kind == "GAT":
            out["att_src"] = self.att_src
            out["att_dst"] = self.att_dst
        return out


# ---------------------------------------------------------------------------
# aggregation coefficients

def gcn_coefficients(adj: SparseAdj, in_weight: np.ndarray):
    deg = 1.0 + np.asarray(in_weight, dtype=np.float64)
    entry = adj.weight / np.sqrt(deg[adj.dst] * deg[adj.src])
    return entry, 1.0 / deg[:adj.n_rows]


def sage_coefficients(adj: SparseAdj):
    counts = adj.row_counts().astype(np.float64)
    entry = 1.0 / counts[adj.dst] if adj.nnz else np.zeros(0)
    return entry, np.ones(adj.n_rows)


def _gat_attention(aug: SparseAdj, Z3: np.ndarray, att_src, att_dst):
    """Per-entry, per-head attention over an adjacency that includes self entries."""
    s_src = np.einsum("nhf,hf->nh", Z3, att_src, dtype=np.float64)
    s_dst = np.einsum("nhf,hf->nh", Z3, att_dst, dtype=np.float64)
    raw = s_dst[aug.dst] + s_src[aug.src]
    logits = np.where(raw > 0, raw, LEAKY_SLOPE * raw)
    starts = aug.indptr[:-1]
    row_max = np.maximum.reduceat(logits, starts, axis=0)
    ex = np.exp(logits - row_max[aug.dst])
    alpha = ex / np.add.reduceat(ex, starts, axis=0)[aug.dst]
    return alpha, raw


def aggregate(adj: SparseAdj, H: np.ndarray, kind: str, *, in_weight=None,
              att_src=None, att_dst=None, partitions=1) -> np.ndarray:
    """Aggregate rows of ``H`` over ``{v} + in-neighbors(v)`` (no weights, no bias).

    For GAT the attention vectors act on ``H`` directly; 1-D vectors mean one head.
    """
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] != adj.n_cols:
        raise ShapeError(f"embedding matrix {H.shape} does not match adjacency")
    if kind == "GCN":
        if in_weight is None:
            raise ShapeError("GCN aggregation needs node in-weights")
        entry, self_c = gcn_coefficients(adj, in_weight)
        return spmm(adj, entry, H, partitions) + self_c[:, None] * H[:adj.n_rows]
    if kind == "SAGE":
        entry, _ = sage_coefficients(adj)
        return spmm(adj, entry, H, partitions) + H[:adj.n_rows]
    if kind == "GAT":
        att_src = np.atleast_2d(att_src)
        att_dst = np.atleast_2d(att_dst)
        heads = att_src.shape[0]
        Z3 = H.reshape(H.shape[0], heads, -1)
        aug = adj.with_self_loops()
        alpha, _ = _gat_attention(aug, Z3, att_src, att_dst)
        return np.concatenate(
            [spmm(aug, alpha[:, h], Z3[:, h, :], partitions) for h in range(heads)], axis=1)
    raise ShapeError(f"unknown aggregation kind {kind!r}")


# ---------------------------------------------------------------------------
# layer forward / backward

@dataclass
class LayerCache:
    H: np.ndarray
    Z: np.ndarray
    adj: SparseAdj
    extra: dict = field(default_factory=dict)


def layer_forward(p: LayerParams, adj: SparseAdj, H: np.ndarray, in_weight: np.ndarray,
                  partitions=1):
    """Pre-activation output of one layer and the cache its backward pass needs."""
    if H.shape[1] != p.in_dim:
        raise ShapeError(f"{p.kind} layer expects width {p.in_dim}, got {H.shape[1]}")
    if H.shape[0] != adj.n_cols:
        raise ShapeError(f"{H.shape[0]} embedding rows for a {adj.n_cols}-column adjacency")
    dtype = p.W.dtype
    Z = H @ p.W
    cache = LayerCache(H, Z, adj)
    if p.kind in ("GCN", "SAGE"):
        if p.kind == "GCN":
            entry, self_c = gcn_coefficients(adj, in_weight)
        else:
            entry, self_c = sage_coefficients(adj)
        out = spmm(adj, entry, Z, partitions) + self_c[:, None] * Z[:adj.n_rows]
        cache.extra.update(entry=entry, self_c=self_c)
    elif p.kind == "GAT":
        n = Z.shape[0]
        Z3 = Z.reshape(n, p.heads, -1)
        aug = adj.with_self_loops()
        alpha, raw = _gat_attention(aug, Z3, p.att_src, p.att_dst)
        out = np.concatenate(
            [spmm(aug, alpha[:, h], Z3[:, h, :], partitions) for h in range(p.heads)], axis=1)
        cache.extra.update(aug=aug, alpha=alpha, raw=raw)
    else:
        raise ShapeError(f"{p.kind} is not a graph layer")
    return (out + p.b).astype(dtype, copy=False), cache


def layer_backward(p: LayerParams, cache: LayerCache, d_out: np.ndarray):
    """Gradients w.r.t. the layer input and parameters, given d(pre-activation)."""
    H, Z, adj = cache.H, cache.Z, cache.adj
    d_out = np.asarray(d_out, dtype=np.float64)
    grads = {"b": d_out.sum(axis=0)}
    if p.kind in ("GCN", "SAGE"):
        entry, self_c = cache.extra["entry"], cache.extra["self_c"]
        dZ = spmm_t(adj, entry, d_out)
        dZ[:adj.n_rows] += self_c[:, None] * d_out
    else:
        aug, alpha, raw = cache.extra["aug"], cache.extra["alpha"], cache.extra["raw"]
        n, heads = Z.shape[0], p.heads
        Z3 = Z.reshape(n, heads, -1).astype(np.float64)
        g3 = d_out.reshape(d_out.shape[0], heads, -1)
        dZ3 = np.zeros_like(Z3)
        for h in range(heads):
            dZ3[:, h, :] += spmm_t(aug, alpha[:, h], g3[:, h, :])
        d_alpha = np.einsum("ehf,ehf->eh", g3[aug.dst], Z3[aug.src])
        row_dot = np.add.reduceat(alpha * d_alpha, aug.indptr[:-1], axis=0)
        d_logit = alpha * (d_alpha - row_dot[aug.dst])
        d_raw = d_logit * np.where(raw > 0, 1.0, LEAKY_SLOPE)
        ds_dst = segment_sum(d_raw, aug)
        ds_src = np.zeros((n, heads))
        np.add.at(ds_src, aug.src, d_raw)
        grads["att_src"] = np.einsum("nh,nhf->hf", ds_src, Z3)
        grads["att_dst"] = np.einsum("nh,nhf->hf", ds_dst, Z3[:adj.n_rows])
        dZ3 += ds_src[:, :, None] * p.att_src[None]
        dZ3[:adj.n_rows] += ds_dst[:, :, None] * p.att_dst[None]
        dZ = dZ3.reshape(n, -1)
    grads["W"] = H.T.astype(np.float64) @ dZ
    dH = dZ @ p.W.T.astype(np.float64)
    return dH, grads
