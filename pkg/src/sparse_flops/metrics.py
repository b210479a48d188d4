"""Sparsity statistics of an activation batch.

All functions take an ``(n, d)`` array of embeddings (one row per input) and
accumulate in float64 whatever the input precision.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np

CSV_COLUMNS = ("n", "d", "p_mean", "flops_per_row", "relaxed_flops", "l1", "r_sub")


def as_batch(batch) -> np.ndarray:
    """Validate and return ``batch`` as a 2-d float64 array."""
    a = np.asarray(batch, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"activation batch must be 2-d, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError("activation batch is empty")
    if not np.all(np.isfinite(a)):
        raise ValueError("activation batch contains non-finite values")
    return a


def activation_probabilities(batch, eps: float = 0.0) -> np.ndarray:
    """Fraction of rows in which each dimension is non-zero.

    ``eps`` > 0 counts ``|a| <= eps`` as zero, for inspecting near-sparse
    dense embeddings. The default is an exact zero test.
    """
    a = as_batch(batch)
    nz = a != 0 if eps == 0 else np.abs(a) > eps
    return nz.mean(axis=0)


def mean_abs_activations(batch) -> np.ndarray:
    return np.abs(as_batch(batch)).mean(axis=0)


def flops_per_row(batch, eps: float = 0.0) -> float:
    """Expected multiply-adds per database row: ``sum_j p_j**2``."""
    p = activation_probabilities(batch, eps)
    return float(np.dot(p, p))


def relaxed_flops(batch) -> float:
    """Continuous surrogate of :func:`flops_per_row`: ``sum_j mean(|a_ij|)**2``."""
    a_bar = mean_abs_activations(batch)
    return float(np.dot(a_bar, a_bar))


def relaxed_flops_pairwise(batch) -> float:
    """``(1/n^2) sum_{p,q} <|a_p|, |a_q|>``, equal to :func:`relaxed_flops` for any batch.

    Written as the Gram sum to expose the orthogonality reading of the
    regularizer on unit-norm embeddings. O(n^2 d).
    """
    a = np.abs(as_batch(batch))
    n = a.shape[0]
    return float((a @ a.T).sum() / (n * n))


def l1_mean(batch) -> float:
    """Mean per-row l1 norm, i.e. ``sum_j mean(|a_ij|)``."""
    return float(mean_abs_activations(batch).sum())


def suboptimality_ratio(batch, eps: float = 0.0) -> float:
    """``F / (d * p_mean**2)``; 1 iff non-zeros are spread evenly.

    Returns ``nan`` when the batch has no non-zeros at all.
    """
    p = activation_probabilities(batch, eps)
    return _r_sub(p)


def _r_sub(p: np.ndarray) -> float:
    p_mean = float(p.mean())
    if p_mean == 0.0:
        return math.nan
    return float(np.dot(p, p)) / (p.size * p_mean * p_mean)


def exclusive_lasso(batch, groups: Sequence[Sequence[tuple[int, int]]] | str = "columns") -> float:
    """Exclusive lasso ``sum_g ||w_g||_1**2`` over the entries of ``batch``.

    ``groups`` partitions the ``(row, col)`` cells of the batch. The string
    shortcuts ``"columns"`` (one group per column; equals ``n**2 * relaxed_flops``),
    ``"rows"`` and ``"all"`` are accepted.
    """
    a = np.abs(as_batch(batch))
    n, d = a.shape
    if isinstance(groups, str):
        if groups == "columns":
            s = a.sum(axis=0)
        elif groups == "rows":
            s = a.sum(axis=1)
        elif groups == "all":
            s = np.array([a.sum()])
        else:
            raise ValueError(f"unknown group shortcut {groups!r}")
        return float(np.dot(s, s))

    seen = np.zeros((n, d), dtype=bool)
    total = 0.0
    for g in groups:
        idx = np.asarray(list(g), dtype=np.int64).reshape(-1, 2)
        if idx.size and (idx.min() < 0 or np.any(idx[:, 0] >= n) or np.any(idx[:, 1] >= d)):
            raise ValueError("group index out of range")
        if np.any(seen[idx[:, 0], idx[:, 1]]):
            raise ValueError("groups overlap; exclusive lasso needs a partition")
        before = int(seen.sum())
        seen[idx[:, 0], idx[:, 1]] = True
        if int(seen.sum()) - before != len(idx):
            raise ValueError("group repeats a cell; exclusive lasso needs a partition")
        s = a[idx[:, 0], idx[:, 1]].sum()
        total += s * s
    if not seen.all():
        raise ValueError("groups do not cover every entry; exclusive lasso needs a partition")
    return float(total)


def column_groups(n: int, d: int) -> list[list[tuple[int, int]]]:
    """Explicit column partition of an ``(n, d)`` batch."""
    return [[(i, j) for i in range(n)] for j in range(d)]


@dataclass(frozen=True)
class SparsityReport:
    n: int
    d: int
    p_bar: np.ndarray
    a_bar: np.ndarray
    p_mean: float
    flops_per_row: float
    relaxed_flops: float
    l1: float
    r_sub: float

    @property
    def dead_dims(self) -> int:
        return int(np.count_nonzero(self.p_bar == 0))

    def csv_row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in CSV_COLUMNS}


def sparsity_report(batch, eps: float = 0.0) -> SparsityReport:
    a = as_batch(batch)
    p = activation_probabilities(a, eps)
    a_bar = np.abs(a).mean(axis=0)
    return SparsityReport(
        n=a.shape[0],
        d=a.shape[1],
        p_bar=p,
        a_bar=a_bar,
        p_mean=float(p.mean()),
        flops_per_row=float(np.dot(p, p)),
        relaxed_flops=float(np.dot(a_bar, a_bar)),
        l1=float(a_bar.sum()),
        r_sub=_r_sub(p),
    )
