"""neuralNDCG (deterministic NeuralSort + Sinkhorn) and the pointwise ablation loss.

All functions accept either a single list (shape ``(m,)``) or a padded batch
(shape ``(B, M)``) with a boolean ``mask`` marking real candidates. Padded
candidates get exactly zero weight in the soft permutation.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad

class DegenerateSlateError(ValueError):
    pass


def _batched(scores, mask):
    scores = ad.as_tensor(scores)
    single = scores.ndim == 1
    if single:
        scores = ad.reshape(scores, (1, scores.shape[0]))
    if mask is None:
        mask = np.ones(scores.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(scores.shape)
    return scores, mask, single


def neural_sort(scores, tau: float = 1.0, mask=None) -> ad.Tensor:
    """Deterministic NeuralSort relaxation of the descending sort.

    Row ``i`` of the result is the softmax over items of
    ``((m + 1 - 2(i + 1)) * s - A 1) / tau`` with ``A[j, k] = |s_j - s_k|``; it
    is a distribution over which item lands at rank ``i``.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s, mask, single = _batched(scores, mask)
    B, M = s.shape
    fmask = mask.astype(np.float64)
    m = fmask.sum(axis=1)  # (B,)
    pair = ad.abs_(ad.reshape(s, (B, M, 1)) - ad.reshape(s, (B, 1, M)))
    a_sum = ad.sum_(pair * fmask[:, None, :], axis=2)  # (B, M): sum_k |s_j - s_k|
    scaling = m[:, None] + 1.0 - 2.0 * np.arange(1, M + 1)[None, :]  # (B, M) over ranks
    logits = (ad.reshape(s, (B, 1, M)) * scaling[:, :, None] - ad.reshape(a_sum, (B, 1, M))) * (1.0 / tau)
    P = ad.masked_softmax(logits, np.broadcast_to(mask[:, None, :], (B, M, M)))
    if not mask.all():
        P = P * fmask[:, :, None]
    return ad.reshape(P, (M, M)) if single else P


def sinkhorn(P, iters: int = 30) -> ad.Tensor:
    """Alternate row then column normalisation ``iters`` times.

    Rows and columns that sum to exactly zero (padding, or underflow at tiny
    temperatures) are left at zero instead of dividing by zero. The backward
    pass replays the normalisations in reverse from stored divisors.
    """
    P = ad.as_tensor(P)
    single = P.ndim == 2
    x = P.data[None] if single else P.data
    steps = []  # (axis, divisor, normalised output) per half-step
    for _ in range(iters):
        for axis in (2, 1):
            total = x.sum(axis=axis, keepdims=True)
            div = total + (total == 0.0)
            x = x / div
            steps.append((axis, div, x))

    def vjp(g):
        g = g[None] if single else g
        for axis, div, out in reversed(steps):
            g = (g - (g * out).sum(axis=axis, keepdims=True)) / div
        return (g[0] if single else g,)

    return ad.custom_op(x[0] if single else x, (P,), vjp)


def _discounts(M: int, k: int | None) -> np.ndarray:
    d = 1.0 / np.log2(np.arange(M) + 2.0)
    if k is not None:
        d[k:] = 0.0
    return d


def ideal_dcg(labels: np.ndarray, mask: np.ndarray, k: int | None = None) -> np.ndarray:
    gains = np.where(mask, np.power(2.0, labels) - 1.0, 0.0)
    ordered = -np.sort(-gains, axis=-1)
    return (ordered * _discounts(labels.shape[-1], k)).sum(axis=-1)


def neural_ndcg_per_slate(scores, labels, mask=None, tau: float = 1.0,
                          sinkhorn_iters: int = 30, k: int | None = None) -> ad.Tensor:
    """Per-slate ``-neuralNDCG`` for a padded batch: shape (B,)."""
    s, mask, _ = _batched(scores, mask)
    y = np.asarray(labels, dtype=np.float64).reshape(s.shape)
    max_dcg = ideal_dcg(y, mask, k)
    if np.any(max_dcg <= 0):
        raise DegenerateSlateError("slate has no positive label")
    P = neural_sort(s, tau, mask)
    if sinkhorn_iters:
        P = sinkhorn(P, sinkhorn_iters)
    gains = np.where(mask, np.power(2.0, y) - 1.0, 0.0)
    sorted_gains = ad.reshape(P @ gains[:, :, None], s.shape)  # (B, M) expected gain per rank
    rank_valid = np.arange(s.shape[1])[None, :] < mask.sum(axis=1)[:, None]
    weights = _discounts(s.shape[1], k)[None, :] * rank_valid / max_dcg[:, None]
    return -ad.sum_(sorted_gains * weights, axis=1)


def neural_ndcg_loss(scores, labels, tau: float = 1.0, sinkhorn_iters: int = 30,
                     k: int | None = None, mask=None) -> ad.Tensor:
    """Mean over slates of ``-neuralNDCG``; a scalar."""
    return ad.mean(neural_ndcg_per_slate(scores, labels, mask, tau, sinkhorn_iters, k))


def pointwise_per_slate(logits, labels, mask=None) -> ad.Tensor:
    """Mean binary cross-entropy per slate, with p(positive) = softmax(logits)[0].

    ``logits`` has a trailing axis of 2. Uses p = sigmoid(l0 - l1), so the loss
    per candidate is softplus(d) - y * d.
    """
    logits = ad.as_tensor(logits)
    single = logits.ndim == 2
    if single:
        logits = ad.reshape(logits, (1, *logits.shape))
    B, M, _ = logits.shape
    y = np.asarray(labels, dtype=np.float64).reshape(B, M)
    fmask = np.ones((B, M)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(B, M)
    d = logits[..., 0] - logits[..., 1]
    per_cand = ad.softplus(d) - d * y
    return ad.sum_(per_cand * (fmask / fmask.sum(axis=1, keepdims=True)), axis=1)


def pointwise_loss(logits, labels, mask=None) -> ad.Tensor:
    return ad.mean(pointwise_per_slate(logits, labels, mask))
