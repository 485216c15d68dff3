"""Baseline forecasters: persistent forecast, moving averages, historical
average and a per-node AR(1).

Moving-average states start at zero before the first observation.
Everything here works on arrays of shape ``(..., d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ctdg import CandidateIndex, EventStream


@dataclass
class EmaState:
    h: np.ndarray
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        self.h = np.asarray(self.h, dtype=np.float64)

    @classmethod
    def zeros(cls, d: int, alpha: float) -> "EmaState":
        return cls(np.zeros(d), alpha)


def pf_predict(x: np.ndarray) -> np.ndarray:
    """Persistent forecast: the last observed vector, unchanged."""
    return np.array(x, dtype=np.float64, copy=True)


def _check_dims(h, x):
    if np.shape(h) != np.shape(x):
        raise ValueError(f"dimension mismatch: state {np.shape(h)} vs input {np.shape(x)}")


def ema_step(state: EmaState, x: np.ndarray) -> EmaState:
    x = np.asarray(x, dtype=np.float64)
    _check_dims(state.h, x)
    a = state.alpha
    return EmaState(a * state.h + (1.0 - a) * x, a)


def sma_step(state: EmaState, x: np.ndarray, w: int) -> EmaState:
    """Recursive simple moving average with window ``w``.

    ``state.alpha`` is ignored and replaced by ``(w - 1) / w``.
    """
    if w < 1:
        raise ValueError(f"window must be >= 1, got {w}")
    x = np.asarray(x, dtype=np.float64)
    _check_dims(state.h, x)
    keep = (w - 1) / w
    return EmaState(keep * state.h + (1.0 / w) * x, keep)


def historical_average(events: EventStream, node: int, index: CandidateIndex, until: float | None = None) -> np.ndarray:
    """Mean weight of past ``(node, v)`` interactions for every candidate v.

    Only events with time strictly before ``until`` count (all events when
    ``until`` is None). Unobserved pairs score zero.
    """
    mask = events.sources == node
    if until is not None:
        mask &= events.times < until
    pos = index.lookup(events.dests[mask])
    w = events.weights[mask]
    keep = pos >= 0
    total = np.bincount(pos[keep], weights=w[keep], minlength=index.d)
    count = np.bincount(pos[keep], minlength=index.d)
    return np.divide(total, count, out=np.zeros(index.d), where=count > 0)


class HistoricalAverage:
    """Streaming form of :func:`historical_average` for many source nodes."""

    def __init__(self, d: int):
        self.d = d
        self.sums: dict[int, np.ndarray] = {}
        self.counts: dict[int, np.ndarray] = {}

    def update(self, sources, positions, weights) -> None:
        for u, p, w in zip(sources, positions, weights):
            if p < 0:
                continue
            u = int(u)
            if u not in self.sums:
                self.sums[u] = np.zeros(self.d)
                self.counts[u] = np.zeros(self.d)
            self.sums[u][p] += w
            self.counts[u][p] += 1

    def predict(self, node: int) -> np.ndarray:
        if node not in self.sums:
            return np.zeros(self.d)
        c = self.counts[node]
        return np.divide(self.sums[node], c, out=np.zeros(self.d), where=c > 0)


@dataclass
class Ar1Coefficients:
    """Per-node ``x_i ~ a * x_{i-1} + b`` fitted by pooled least squares."""

    a: dict[int, float]
    b: dict[int, float]
    default_a: float = 1.0
    default_b: float = 0.0

    def get(self, node: int) -> tuple[float, float]:
        return self.a.get(node, self.default_a), self.b.get(node, self.default_b)


def fit_ar1_series(series) -> tuple[float, float]:
    """Least-squares ``(a, b)`` for one node's ordered affinity vectors.

    All entries of consecutive pairs are pooled. A constant predictor
    (zero variance) gives ``a = 0`` and ``b`` equal to the mean target.
    """
    series = np.asarray(series, dtype=np.float64)
    if len(series) < 2:
        raise ValueError("AR(1) fit needs at least two observations")
    prev = series[:-1].ravel()
    nxt = series[1:].ravel()
    var = np.var(prev)
    # relative threshold: a constant series leaves rounding-level variance
    if var <= 1e-24 * max(1.0, float(np.mean(prev**2))):
        return 0.0, float(nxt.mean())
    a = float(np.mean((prev - prev.mean()) * (nxt - nxt.mean())) / var)
    b = float(nxt.mean() - a * prev.mean())
    return a, b


def fit_ar1(series_by_node: dict[int, np.ndarray]) -> Ar1Coefficients:
    """Fit one AR(1) per node; nodes with fewer than two vectors are left
    to the persistent-forecast default ``a=1, b=0``."""
    a, b = {}, {}
    for node, series in series_by_node.items():
        if len(series) >= 2:
            a[node], b[node] = fit_ar1_series(series)
    return Ar1Coefficients(a, b)


def ar1_predict(coeffs: Ar1Coefficients | tuple[float, float], x: np.ndarray, node: int | None = None) -> np.ndarray:
    if isinstance(coeffs, Ar1Coefficients):
        a, b = coeffs.get(node)
    else:
        a, b = coeffs
    return np.maximum(a * np.asarray(x, dtype=np.float64) + b, 0.0)
