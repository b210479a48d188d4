"""Inverted-index retrieval over sparse embeddings.

The database matrix ``D`` (``n`` rows, ``d`` columns) is stored column-wise:
for every dimension ``j`` a posting list of ``(row_id, value)`` pairs for the
non-zero entries of column ``j``, in ascending row order. A sparse query only
touches the posting lists of its own non-zero dimensions, so the work done is
the number of coincident non-zeros ``|{(i, j): u_j != 0 and D_ij != 0}|``,
which :func:`spmv_query` reports exactly as ``flops_used``.

Posting lists are held CSC-style in three flat arrays (``col_ptr``,
``row_ids``, ``values``) rather than as linked lists.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

DEFAULT_THRESHOLD = 0.25
DEFAULT_K = 1000


class DimensionError(ValueError):
    """Vectors or matrices whose dimensions do not line up."""


@dataclass(frozen=True)
class SparseVec:
    """A sparse vector of length ``dim`` with strictly increasing ``indices``."""

    dim: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        val = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.dim < 1:
            raise DimensionError(f"dim must be >= 1, got {self.dim}")
        if idx.shape != val.shape:
            raise ValueError("indices and values differ in length")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.dim:
                raise IndexError(f"index out of range for dim {self.dim}")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("indices must be strictly increasing")
        if not np.all(np.isfinite(val)):
            raise ValueError("values must be finite")
        if np.any(val == 0):
            raise ValueError("explicit zeros are not stored")
        idx.setflags(write=False)
        val.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def from_dense(cls, x) -> SparseVec:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        (idx,) = np.nonzero(x)
        return cls(x.size, idx, x[idx])

    @classmethod
    def from_pairs(cls, dim: int, pairs: Iterable[tuple[int, float]]) -> SparseVec:
        pairs = sorted(pairs)
        return cls(dim, [p[0] for p in pairs], [p[1] for p in pairs])

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out


@dataclass(frozen=True)
class QueryResult:
    candidates: list[tuple[int, float]]
    flops_used: int


@dataclass(frozen=True, eq=False)
class InvertedIndex:
    """Per-column posting lists of a sparse ``num_rows x dim`` matrix.

    Immutable once built, so one index can serve concurrent queries.
    """

    dim: int
    num_rows: int
    col_ptr: np.ndarray = field(repr=False)
    row_ids: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    row_norms: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("col_ptr", "row_ids", "values", "row_norms"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @classmethod
    def from_dense(cls, matrix, dim: int | None = None) -> InvertedIndex:
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2:
            if m.size == 0 and dim is not None:
                m = m.reshape(0, dim)
            else:
                raise DimensionError(f"expected a 2-d matrix, got shape {m.shape}")
        if dim is not None and m.shape[1] != dim:
            raise DimensionError(f"matrix has {m.shape[1]} columns, expected {dim}")
        if not np.all(np.isfinite(m)):
            raise ValueError("matrix contains non-finite values")
        n, d = m.shape
        if d < 1:
            raise DimensionError("dim must be >= 1")
        # Column-major scan of the non-zeros keeps rows ascending within each column.
        cols, rows = np.nonzero(m.T)
        counts = np.bincount(cols, minlength=d)
        col_ptr = np.zeros(d + 1, dtype=np.int64)
        np.cumsum(counts, out=col_ptr[1:])
        return cls(
            dim=d,
            num_rows=n,
            col_ptr=col_ptr,
            row_ids=rows.astype(np.int64),
            values=m[rows, cols],
            row_norms=csc_row_norms(rows, m[rows, cols], n),
        )

    @property
    def nnz(self) -> int:
        return int(self.row_ids.size)

    def posting(self, j: int) -> list[tuple[int, float]]:
        lo, hi = self.col_ptr[j], self.col_ptr[j + 1]
        return list(zip(self.row_ids[lo:hi].tolist(), self.values[lo:hi].tolist()))

    def posting_lengths(self) -> np.ndarray:
        return np.diff(self.col_ptr)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.num_rows, self.dim))
        cols = np.repeat(np.arange(self.dim), self.posting_lengths())
        out[self.row_ids, cols] = self.values
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.num_rows == other.num_rows
            and np.array_equal(self.col_ptr, other.col_ptr)
            and np.array_equal(self.row_ids, other.row_ids)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def csc_row_norms(row_ids, values, num_rows: int) -> np.ndarray:
    """Row ℓ2 norms from CSC postings, summed in ascending column order.

    Every constructor goes through here so equal indexes have bit-equal norms.
    """
    return np.sqrt(np.bincount(row_ids, weights=values * values, minlength=num_rows))


def build_index(rows: Sequence[SparseVec], dim: int) -> InvertedIndex:
    """Build the inverted index of a database given as sparse rows."""
    if dim < 1:
        raise DimensionError(f"dim must be >= 1, got {dim}")
    for i, r in enumerate(rows):
        if r.dim != dim:
            raise DimensionError(f"row {i} has dim {r.dim}, expected {dim}")
    n = len(rows)
    lengths = np.fromiter((r.nnz for r in rows), dtype=np.int64, count=n)
    if n and lengths.sum():
        row_of = np.repeat(np.arange(n, dtype=np.int64), lengths)
        cols = np.concatenate([r.indices for r in rows])
        vals = np.concatenate([r.values for r in rows])
    else:
        row_of = np.zeros(0, dtype=np.int64)
        cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0)
    # Stable sort by column keeps the (ascending) row order inside each posting list.
    order = np.argsort(cols, kind="stable")
    col_ptr = np.zeros(dim + 1, dtype=np.int64)
    np.cumsum(np.bincount(cols, minlength=dim), out=col_ptr[1:])
    return InvertedIndex(
        dim=dim,
        num_rows=n,
        col_ptr=col_ptr,
        row_ids=row_of[order],
        values=vals[order],
        row_norms=csc_row_norms(row_of[order], vals[order], n),
    )


def _as_query(index: InvertedIndex, query) -> SparseVec:
    if not isinstance(query, SparseVec):
        query = SparseVec.from_dense(query)
    if query.dim != index.dim:
        raise DimensionError(f"query has dim {query.dim}, index has dim {index.dim}")
    return query


def spmv_query(index: InvertedIndex, query: SparseVec) -> tuple[np.ndarray, int]:
    """Score every database row against ``query`` via the posting lists.

    Returns the dense score vector ``D @ u`` and the number of multiply-adds
    performed. Each row's score is accumulated in ascending column order.
    """
    query = _as_query(index, query)
    n = index.num_rows
    if query.nnz == 0 or n == 0:
        return np.zeros(n), 0
    lo = index.col_ptr[query.indices]
    hi = index.col_ptr[query.indices + 1]
    lengths = hi - lo
    flops = int(lengths.sum())
    if flops == 0:
        return np.zeros(n), 0
    # Gather the touched posting lists back to back, in ascending column order.
    starts = np.repeat(lo - np.cumsum(lengths) + lengths, lengths)
    pos = starts + np.arange(flops)
    rows = index.row_ids[pos]
    contrib = index.values[pos] * np.repeat(query.values, lengths)
    # bincount adds weights in input order, i.e. the s[i] += v * u_j loop.
    scores = np.bincount(rows, weights=contrib, minlength=n)
    return scores, flops


def threshold_topk(scores, threshold: float = DEFAULT_THRESHOLD, k: int = DEFAULT_K) -> list[tuple[int, float]]:
    """Rows scoring at least ``threshold``, cut to the ``k`` best.

    Ordered by descending score, ties by ascending row id. Uses partial
    selection, O(n + k log k).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    (survivors,) = np.nonzero(scores >= threshold)
    if survivors.size > k:
        s = scores[survivors]
        kth = np.partition(s, s.size - k)[s.size - k]
        above = survivors[s > kth]
        ties = survivors[s == kth][: k - above.size]
        survivors = np.concatenate([above, ties])
    s = scores[survivors]
    order = np.lexsort((survivors, -s))
    return [(int(i), float(v)) for i, v in zip(survivors[order], s[order])]


def rerank(candidates, dense_db, dense_query, final_k: int) -> list[tuple[int, float]]:
    """Rescore ``candidates`` by dense dot product with ``dense_query`` and keep ``final_k``."""
    if final_k < 1:
        raise ValueError(f"final_k must be >= 1, got {final_k}")
    db = np.asarray(dense_db, dtype=np.float64)
    q = np.asarray(dense_query, dtype=np.float64).reshape(-1)
    if db.ndim != 2 or q.size != db.shape[1]:
        raise DimensionError(f"dense query of length {q.size} against db of shape {db.shape}")
    cand = np.asarray([c[0] if isinstance(c, tuple) else c for c in candidates], dtype=np.int64)
    if cand.size == 0:
        return []
    if cand.min() < 0 or cand.max() >= db.shape[0]:
        raise IndexError(f"candidate row id out of range for {db.shape[0]} rows")
    s = db[cand] @ q
    order = np.lexsort((cand, -s))[:final_k]
    return [(int(i), float(v)) for i, v in zip(cand[order], s[order])]


def search(
    index: InvertedIndex,
    query,
    threshold: float = DEFAULT_THRESHOLD,
    k: int = DEFAULT_K,
    exclude: int | None = None,
) -> QueryResult:
    """Sparse nearest neighbours: SpMV scoring, thresholding, then top-k.

    ``exclude`` drops one row from the result (leave-one-out evaluation).
    """
    scores, flops = spmv_query(index, query)
    if exclude is not None:
        scores[exclude] = -np.inf
    return QueryResult(threshold_topk(scores, threshold, k), flops)


def search_rerank(
    index: InvertedIndex,
    query,
    dense_db,
    dense_query,
    final_k: int = 1,
    threshold: float = DEFAULT_THRESHOLD,
    k: int = DEFAULT_K,
    exclude: int | None = None,
) -> QueryResult:
    """:func:`search` followed by dense re-ranking of the shortlist."""
    res = search(index, query, threshold, k, exclude)
    return QueryResult(rerank([c for c, _ in res.candidates], dense_db, dense_query, final_k), res.flops_used)


def dense_topk(dense_db, dense_query, k: int, exclude: int | None = None) -> list[tuple[int, float]]:
    """Exhaustive dense search, same ordering contract as :func:`threshold_topk`."""
    scores = np.asarray(dense_db, dtype=np.float64) @ np.asarray(dense_query, dtype=np.float64)
    if exclude is not None:
        scores[exclude] = -np.inf
    return threshold_topk(scores, -np.finfo(np.float64).max, k)
