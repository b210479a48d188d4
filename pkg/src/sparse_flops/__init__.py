"""Sparse embeddings for fast retrieval: inverted-index search with exact
FLOPs accounting, sparsity metrics and regularizers, a small metric-learning
trainer, and closed-form analysis of ReLU-Gaussian activations."""

from .metrics import (
    SparsityReport,
    activation_probabilities,
    exclusive_lasso,
    flops_per_row,
    l1_mean,
    relaxed_flops,
    relaxed_flops_pairwise,
    sparsity_report,
    suboptimality_ratio,
)
from .sparse_core import (
    DEFAULT_K,
    DEFAULT_THRESHOLD,
    DimensionError,
    InvertedIndex,
    QueryResult,
    SparseVec,
    build_index,
    dense_topk,
    rerank,
    search,
    search_rerank,
    spmv_query,
    threshold_topk,
)

__version__ = "0.1.0"
