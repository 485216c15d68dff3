"""Training objectives and the NDCG@k metric.

Pairwise losses work on the ranking induced by the predicted scores:
``perm`` sorts candidates by descending score, ties going to the lower
index. A pair of rank positions ``(i, j)`` takes part when the item at
``i`` has strictly larger ground truth than the item at ``j`` and at least
one of the two positions lies in the top ``top_k``.

The lambda loss is written with a leading minus sign,
``-log2(sigmoid(sigma * (s_i - s_j)))``, so that it is minimized by
ordering pairs correctly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .cells import sigmoid

LN2 = np.log(2.0)
GAIN_MODES = ("literal", "exponential")
LOSS_KINDS = ("rank", "rank+reg", "ce")


def _as_2d(a):
    a = np.asarray(a, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


def _check(s, y):
    if s.shape != y.shape:
        raise ValueError(f"score/label shape mismatch: {s.shape} vs {y.shape}")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite scores or labels")


def _log_softmax(s):
    m = s.max(axis=-1, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=-1, keepdims=True))


def cross_entropy(s, y):
    """``-sum_v y(v) log softmax(s)(v)``; per row when given a 2-D batch."""
    s, y = np.asarray(s, dtype=np.float64), np.asarray(y, dtype=np.float64)
    _check(s, y)
    out = -(y * _log_softmax(s)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def cross_entropy_grad(s, y):
    s, y = np.asarray(s, dtype=np.float64), np.asarray(y, dtype=np.float64)
    p = np.exp(_log_softmax(s))
    return p * y.sum(axis=-1, keepdims=True) - y


def descending_order(s) -> np.ndarray:
    """Rank order by descending score, ties broken by ascending index."""
    return np.argsort(-np.asarray(s, dtype=np.float64), axis=-1, kind="stable")


@lru_cache(maxsize=64)
def _pair_positions(d: int, top_k: int):
    i, j = np.nonzero(~np.eye(d, dtype=bool))
    keep = np.minimum(i, j) < top_k
    i, j = i[keep], j[keep]
    gap = np.abs(i - j).astype(np.float64)
    # D_m = log2(1 + m)
    delta = np.abs(1.0 / np.log2(1.0 + gap) - 1.0 / np.log2(2.0 + gap))
    # +1 at the first member, -1 at the second: maps pair terms to positions
    incidence = np.zeros((len(i), d))
    incidence[np.arange(len(i)), i] = 1.0
    incidence[np.arange(len(i)), j] = -1.0
    return i, j, delta, incidence


def discounts(d: int) -> np.ndarray:
    """``log2(1 + i)`` for rank positions ``i = 1..d``."""
    return np.log2(np.arange(2, d + 2, dtype=np.float64))


def max_dcg(y, gain: str = "literal") -> np.ndarray:
    """Ideal DCG over the full list, linear gains (``literal``) or
    ``2**y - 1`` gains (``exponential``)."""
    y = _as_2d(y)
    ys = -np.sort(-y, axis=-1)
    if gain == "exponential":
        ys = np.exp2(ys) - 1.0
    elif gain != "literal":
        raise ValueError(f"unknown gain mode {gain!r}")
    return (ys / discounts(y.shape[-1])).sum(axis=-1)


@dataclass
class RankingContext:
    """Sorted view of a batch of (scores, labels) rows, shape ``(n, d)``."""

    perm: np.ndarray
    s_sorted: np.ndarray
    y_sorted: np.ndarray
    gains: np.ndarray
    max_dcg: np.ndarray
    sigma: float = 1.0
    top_k: int = 20

    @property
    def d(self) -> int:
        return self.perm.shape[-1]


def ranking_context(s, y, sigma: float = 1.0, top_k: int = 20, gain: str = "literal") -> RankingContext:
    s, y = _as_2d(s), _as_2d(y)
    _check(s, y)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    perm = descending_order(s)
    s_sorted = np.take_along_axis(s, perm, axis=-1)
    y_sorted = np.take_along_axis(y, perm, axis=-1)
    mdcg = max_dcg(y, gain)
    safe = np.where(mdcg > 0, mdcg, 1.0)
    gains = np.where(mdcg[:, None] > 0, (np.exp2(y_sorted) - 1.0) / safe[:, None], 0.0)
    return RankingContext(perm, s_sorted, y_sorted, gains, mdcg, sigma, min(top_k, s.shape[-1]))


@dataclass
class _Pairs:
    i: np.ndarray
    j: np.ndarray
    delta: np.ndarray
    incidence: np.ndarray
    active: np.ndarray
    diff: np.ndarray


def _pairs(ctx: RankingContext) -> _Pairs:
    i, j, delta, incidence = _pair_positions(ctx.d, ctx.top_k)
    active = ctx.y_sorted[:, i] > ctx.y_sorted[:, j]
    diff = ctx.s_sorted[:, i] - ctx.s_sorted[:, j]
    return _Pairs(i, j, delta, incidence, active, diff)


def _scatter(ctx, pairs: _Pairs, coef):
    """Map per-pair ``d(loss)/d(s_i - s_j)`` back to unsorted score gradients."""
    g_sorted = coef @ pairs.incidence
    grad = np.empty_like(g_sorted)
    np.put_along_axis(grad, ctx.perm, g_sorted, axis=-1)
    return grad


def _lambda_terms(ctx: RankingContext, pairs: _Pairs, with_grad: bool):
    """Loss per row and, optionally, the per-pair derivative coefficients."""
    weight = np.where(pairs.active, pairs.delta * np.abs(ctx.gains[:, pairs.i] - ctx.gains[:, pairs.j]), 0.0)
    z = ctx.sigma * pairs.diff
    value = (np.logaddexp(0.0, -z) / LN2 * weight).sum(axis=-1)
    if not with_grad:
        return value, None
    return value, -ctx.sigma * sigmoid(-z) / LN2 * weight


def _margin_terms(pairs: _Pairs, margin: float, with_grad: bool):
    slack = np.where(pairs.active, margin - pairs.diff, 0.0)
    value = np.maximum(slack, 0.0).sum(axis=-1)
    if not with_grad:
        return value, None
    return value, -(slack > 0).astype(np.float64)


def _unbatch(value, s):
    return float(value[0]) if np.ndim(s) == 1 else value


def lambda_loss(s, y, ctx: RankingContext | None = None, sigma: float = 1.0, top_k: int = 20, gain: str = "literal"):
    """Pairwise lambda loss weighted by rank-discount and gain differences.

    Rows whose ground truth is all zero contribute 0.
    """
    ctx = ctx or ranking_context(s, y, sigma, top_k, gain)
    return _unbatch(_lambda_terms(ctx, _pairs(ctx), False)[0], s)


def margin_reg(s, y, margin: float = 1e-3, top_k: int = 20, ctx: RankingContext | None = None):
    """Hinge penalty ``max(0, margin - (s_i - s_j))`` over the same pairs."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    ctx = ctx or ranking_context(s, y, top_k=top_k)
    return _unbatch(_margin_terms(_pairs(ctx), margin, False)[0], s)


def total_loss(s, y, ctx: RankingContext | None = None, margin: float = 1e-3, kind: str = "rank+reg",
               sigma: float = 1.0, top_k: int = 20, gain: str = "literal"):
    """Loss value and its gradient with respect to ``s``.

    ``kind`` selects ``rank`` (lambda loss only), ``rank+reg`` (lambda loss
    plus margin regularization, unit weight) or ``ce`` (cross-entropy).
    For 2-D input the value is per row and the gradient has the input shape.
    """
    if kind == "ce":
        return cross_entropy(s, y), cross_entropy_grad(s, y)
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    ctx = ctx or ranking_context(s, y, sigma, top_k, gain)
    pairs = _pairs(ctx)
    value, coef = _lambda_terms(ctx, pairs, True)
    if kind == "rank+reg":
        v2, c2 = _margin_terms(pairs, margin, True)
        value, coef = value + v2, coef + c2
    grad = _scatter(ctx, pairs, coef)
    if np.ndim(s) == 1:
        return float(value[0]), grad[0]
    return value, grad


def ndcg_at_k(s, y, k: int = 10):
    """NDCG@k with linear gains and ``log2(rank + 1)`` discounts.

    Rows without a positive label score 0.
    """
    s2, y2 = _as_2d(s), _as_2d(y)
    _check(s2, y2)
    k = min(k, s2.shape[-1])
    disc = discounts(k)
    order = descending_order(s2)[:, :k]
    dcg = (np.take_along_axis(y2, order, axis=-1) / disc).sum(axis=-1)
    ideal = (-np.sort(-y2, axis=-1)[:, :k] / disc).sum(axis=-1)
    out = np.where(ideal > 0, dcg / np.where(ideal > 0, ideal, 1.0), 0.0)
    return _unbatch(out, s)
