"""Synthetic class-clustered data with an unseen-class evaluation split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SyntheticDataset:
    centers: np.ndarray  # C x input_dim, unit rows
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    noise: float

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def input_dim(self) -> int:
        return self.centers.shape[1]

    @property
    def train_classes(self) -> np.ndarray:
        return np.unique(self.train_y)

    @property
    def eval_classes(self) -> np.ndarray:
        return np.unique(self.eval_y)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def generate_synthetic(
    num_classes: int = 256,
    per_class: int = 30,
    input_dim: int = 128,
    noise: float = 0.1,
    seed: int = 0,
    eval_fraction: float = 0.25,
) -> SyntheticDataset:
    """Gaussian clusters around random unit centers, split by class.

    Each sample is ``normalize(center + noise * N(0, I))``. The last
    ``eval_fraction`` of a random class permutation is held out, so evaluation
    classes never appear in training.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if not 0 < eval_fraction < 1:
        raise ValueError("eval_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    centers = _unit_rows(rng.standard_normal((num_classes, input_dim)))
    y = np.repeat(np.arange(num_classes), per_class)
    x = _unit_rows(centers[y] + noise * rng.standard_normal((y.size, input_dim)))
    perm = rng.permutation(num_classes)
    n_eval = max(1, int(round(eval_fraction * num_classes)))
    n_eval = min(n_eval, num_classes - 1)
    eval_cls = np.zeros(num_classes, dtype=bool)
    eval_cls[perm[num_classes - n_eval :]] = True
    is_eval = eval_cls[y]
    return SyntheticDataset(centers, x[~is_eval], y[~is_eval], x[is_eval], y[is_eval], noise)
