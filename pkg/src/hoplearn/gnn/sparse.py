"""Destination-sorted sparse adjacency and row-partitioned aggregation kernels."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..errors import ShapeError


class SparseAdj:
    """Entries ``(dst, src, weight)`` sorted by ``(dst, src)``.

    ``eid`` maps each entry back to its row in the batch edge-feature matrix.
    """

    def __init__(self, dst, src, weight, n_rows: int, n_cols: int | None = None, eid=None,
                 presorted: bool = False):
        dst = np.asarray(dst, dtype=np.int64)
        src = np.asarray(src, dtype=np.int64)
        weight = np.asarray(weight, dtype=np.float64)
        eid = np.arange(dst.size, dtype=np.int64) if eid is None else np.asarray(eid, np.int64)
        if not (dst.shape == src.shape == weight.shape == eid.shape):
            raise ShapeError("dst, src, weight and eid must have equal length")
        if not presorted and dst.size:
            order = np.lexsort((src, dst))
            dst, src, weight, eid = dst[order], src[order], weight[order], eid[order]
        self.dst, self.src, self.weight, self.eid = dst, src, weight, eid
        self.n_rows = int(n_rows)
        self.n_cols = int(n_rows if n_cols is None else n_cols)
        if dst.size and (dst.max() >= self.n_rows or src.max() >= self.n_cols or
                         dst.min() < 0 or src.min() < 0):
            raise ShapeError("adjacency entry outside the matrix bounds")
        self.indptr = np.searchsorted(dst, np.arange(self.n_rows + 1)).astype(np.int64)

    @property
    def nnz(self) -> int:
        return int(self.dst.size)

    def row_counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def subset(self, mask) -> "SparseAdj":
        mask = np.asarray(mask, dtype=bool)
        return SparseAdj(self.dst[mask], self.src[mask], self.weight[mask], self.n_rows,
                         self.n_cols, self.eid[mask], presorted=True)

    def with_self_loops(self) -> "SparseAdj":
        """Prepend a ``(v, v)`` entry to every row (``eid`` = -1 for the added ones)."""
        rows = np.arange(self.n_rows, dtype=np.int64)
        dst = np.concatenate([rows, self.dst])
        src = np.concatenate([rows, self.src])
        w = np.concatenate([np.ones(self.n_rows), self.weight])
        eid = np.concatenate([np.full(self.n_rows, -1, dtype=np.int64), self.eid])
        rank = np.concatenate([np.zeros(self.n_rows, np.int64), np.ones(self.nnz, np.int64)])
        order = np.lexsort((src, rank, dst))
        return SparseAdj(dst[order], src[order], w[order], self.n_rows, self.n_cols,
                         eid[order], presorted=True)

    def entries(self) -> set[tuple[int, int]]:
        return set(zip(self.dst.tolist(), self.src.tolist()))

    def __repr__(self):
        return f"SparseAdj({self.n_rows}x{self.n_cols}, nnz={self.nnz})"


@dataclass(frozen=True)
class EdgePartition:
    """``t`` contiguous ranges of whole destination rows: ``(row_start, row_stop)``."""
    t: int
    row_bounds: tuple[tuple[int, int], ...]
    entry_bounds: tuple[tuple[int, int], ...]

    def sizes(self) -> list[int]:
        return [b - a for a, b in self.entry_bounds]


def partition_edges(adj: SparseAdj, t: int) -> EdgePartition:
    """Split rows into ``t`` ranges with near-equal entry counts.

    Cut ``p`` sits at the row boundary closest to ``p * nnz / t``, so every
    part is within one row's worth of entries of the ideal share.
    """
    if t < 1:
        raise ValueError("partition count must be >= 1")
    indptr = adj.indptr
    cuts = [0]
    for p in range(1, t):
        ideal = p * adj.nnz / t
        r = int(np.searchsorted(indptr, ideal))
        r = min(max(r, 0), adj.n_rows)
        if r > 0 and abs(indptr[r - 1] - ideal) <= abs(indptr[r] - ideal):
            r -= 1
        cuts.append(max(r, cuts[-1]))
    cuts.append(adj.n_rows)
    rows = tuple((cuts[i], cuts[i + 1]) for i in range(t))
    entries = tuple((int(indptr[a]), int(indptr[b])) for a, b in rows)
    return EdgePartition(t, rows, entries)


def _csr(adj: SparseAdj, coeffs: np.ndarray) -> sp.csr_matrix:
    return sp.csr_matrix((np.asarray(coeffs, dtype=np.float64), adj.src, adj.indptr),
                         shape=(adj.n_rows, adj.n_cols))


def spmm(adj: SparseAdj, coeffs, H: np.ndarray, partitions=1) -> np.ndarray:
    """``out[v] = sum_e coeffs[e] * H[src[e]]`` over the entries of row v, in float64.

    Each row is accumulated by one thread in entry order, so the result is
    bitwise independent of the partitioning.
    """
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] != adj.n_cols:
        raise ShapeError(f"embedding matrix {H.shape} does not match adjacency {adj.n_rows}x{adj.n_cols}")
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (adj.nnz,):
        raise ShapeError("one coefficient per adjacency entry is required")
    part = partitions if isinstance(partitions, EdgePartition) else partition_edges(adj, partitions)
    H64 = H.astype(np.float64, copy=False)
    out = np.zeros((adj.n_rows, H.shape[1]), dtype=np.float64)
    mat = _csr(adj, coeffs)

    def run(bounds):
        a, b = bounds
        if b > a:
            out[a:b] = mat[a:b] @ H64
    nonempty = [rb for rb in part.row_bounds if rb[1] > rb[0]]
    if part.t == 1 or len(nonempty) <= 1:
        for rb in nonempty:
            run(rb)
    else:
        with ThreadPoolExecutor(max_workers=part.t) as pool:
            list(pool.map(run, nonempty))
    return out


def spmm_t(adj: SparseAdj, coeffs, G: np.ndarray) -> np.ndarray:
    """Transpose product: ``out[src[e]] += coeffs[e] * G[dst[e]]``."""
    return np.asarray(_csr(adj, coeffs).T @ np.asarray(G, dtype=np.float64))


def segment_sum(values: np.ndarray, adj: SparseAdj) -> np.ndarray:
    """Per-destination-row sums of per-entry values (rows without entries get 0)."""
    out = np.zeros((adj.n_rows,) + values.shape[1:], dtype=np.float64)
    if adj.nnz:
        np.add.at(out, adj.dst, values)
    return out
