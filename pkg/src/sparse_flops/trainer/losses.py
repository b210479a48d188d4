"""Triplet loss, sparsity regularizers and their gradients w.r.t. embeddings."""

from __future__ import annotations

import enum

import numpy as np

from .. import metrics


class RegularizerKind(str, enum.Enum):
    FLOPS = "FLOPS"
    L1 = "L1"
    NONE = "NONE"


def triplet_loss(anchors, positives, negatives, margin: float):
    """Mean hinge ``max(0, |a-p|^2 - |a-n|^2 + margin)`` over triplets.

    Returns ``(loss, (grad_a, grad_p, grad_n))``; inactive triplets (hinge
    argument <= 0) contribute zero gradient.
    """
    if margin <= 0:
        raise ValueError("margin must be > 0")
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    n = np.asarray(negatives, dtype=np.float64)
    if not (a.shape == p.shape == n.shape) or a.ndim != 2:
        raise ValueError("anchors, positives and negatives must share a 2-d shape")
    t = a.shape[0]
    if t == 0:
        return 0.0, (np.zeros_like(a), np.zeros_like(p), np.zeros_like(n))
    d_ap = a - p
    d_an = a - n
    hinge = np.einsum("ij,ij->i", d_ap, d_ap) - np.einsum("ij,ij->i", d_an, d_an) + margin
    active = (hinge > 0)[:, None] * (2.0 / t)
    loss = float(np.maximum(hinge, 0.0).sum() / t)
    grad_p = -d_ap * active
    grad_n = d_an * active
    grad_a = -(grad_p + grad_n)
    return loss, (grad_a, grad_p, grad_n)


def batch_triplet_loss(embeddings, triplets, margin: float):
    """:func:`triplet_loss` on index triplets ``(anchor, positive, negative)`` into ``embeddings``.

    Gradients are scattered back onto the rows of ``embeddings``.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    tri = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    loss, (ga, gp, gn) = triplet_loss(z[tri[:, 0]], z[tri[:, 1]], z[tri[:, 2]], margin)
    grad = np.zeros_like(z)
    np.add.at(grad, tri[:, 0], ga)
    np.add.at(grad, tri[:, 1], gp)
    np.add.at(grad, tri[:, 2], gn)
    return loss, grad


def flops_reg_grad(batch) -> np.ndarray:
    """Gradient of ``sum_j mean_i(|a_ij|)^2``: ``(2/n) * a_bar_j * sgn(a_ij)``."""
    a = metrics.as_batch(batch)
    a_bar = np.abs(a).mean(axis=0)
    return (2.0 / a.shape[0]) * a_bar[None, :] * np.sign(a)


def l1_reg_grad(batch) -> np.ndarray:
    """Gradient of ``sum_j mean_i |a_ij|``: ``sgn(a_ij) / n``."""
    a = metrics.as_batch(batch)
    return np.sign(a) / a.shape[0]


def regularizer(kind, batch) -> tuple[float, np.ndarray]:
    """Value and gradient of the chosen sparsity regularizer on an embedding batch."""
    kind = RegularizerKind(kind)
    if kind is RegularizerKind.FLOPS:
        return metrics.relaxed_flops(batch), flops_reg_grad(batch)
    if kind is RegularizerKind.L1:
        return metrics.l1_mean(batch), l1_reg_grad(batch)
    a = np.asarray(batch, dtype=np.float64)
    return 0.0, np.zeros_like(a)


def mine_triplets(embeddings, labels, rng: np.random.Generator) -> np.ndarray:
    """Random in-class positive and hardest in-batch negative for every anchor.

    Anchors without a same-class partner or without any negative are skipped.
    Hardest means smallest squared distance; ties go to the lowest index.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    sq = np.einsum("ij,ij->i", z, z)
    dist = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    same = y[:, None] == y[None, :]
    out = []
    for i in range(z.shape[0]):
        pos = np.flatnonzero(same[i])
        pos = pos[pos != i]
        neg_mask = ~same[i]
        if pos.size == 0 or not neg_mask.any():
            continue
        p = pos[rng.integers(pos.size)]
        n = int(np.argmin(np.where(neg_mask, dist[i], np.inf)))
        out.append((i, int(p), n))
    return np.asarray(out, dtype=np.int64).reshape(-1, 3)
