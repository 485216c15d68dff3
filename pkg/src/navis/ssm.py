"""Discrete linear state-space layer ``h = A h + B x``, ``s = C h + D x``.

Matrices are either dense ``(d, d)`` arrays or diagonals stored as 1-D
arrays of length ``d``; :func:`instantiate_heuristic` returns the diagonal
form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _apply(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    if m.ndim == 1:
        return m * v
    return v @ m.T


@dataclass
class LinearSsmParams:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        mats = [np.asarray(m, dtype=np.float64) for m in (self.A, self.B, self.C, self.D)]
        self.A, self.B, self.C, self.D = mats
        d = mats[0].shape[0]
        for m in mats:
            if m.ndim == 1 and m.shape != (d,) or m.ndim == 2 and m.shape != (d, d) or m.ndim > 2:
                raise ValueError("SSM matrices must all be (d,) diagonals or (d, d)")
            if not np.all(np.isfinite(m)):
                raise ValueError("SSM matrices must be finite")

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def dense(self) -> "LinearSsmParams":
        return LinearSsmParams(*(np.diag(m) if m.ndim == 1 else m for m in (self.A, self.B, self.C, self.D)))


def ssm_step(params: LinearSsmParams, h_prev: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if h_prev.shape[-1] != params.d or x.shape[-1] != params.d:
        raise ValueError(f"expected vectors of length {params.d}")
    h = _apply(params.A, h_prev) + _apply(params.B, x)
    s = _apply(params.C, h) + _apply(params.D, x)
    return h, s


def ssm_run(params: LinearSsmParams, xs: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """Outputs for a whole input sequence ``xs`` of shape ``(n, d)``."""
    h = np.zeros(params.d) if h0 is None else np.asarray(h0, dtype=np.float64)
    out = np.empty((len(xs), params.d))
    for i, x in enumerate(xs):
        h, out[i] = ssm_step(params, h, x)
    return out


def instantiate_heuristic(kind: str, d: int, alpha: float | None = None, w: int | None = None) -> LinearSsmParams:
    """Diagonal SSM matrices that reproduce ``pf``, ``ema`` or ``sma``."""
    if d < 1:
        raise ValueError("d must be >= 1")
    one = np.ones(d)
    zero = np.zeros(d)
    if kind == "pf":
        return LinearSsmParams(zero, zero, zero, one)
    if kind == "ema":
        if alpha is None or not 0.0 <= alpha <= 1.0:
            raise ValueError("ema needs alpha in [0, 1]")
        return LinearSsmParams(alpha * one, (1.0 - alpha) * one, one, zero)
    if kind == "sma":
        if w is None or int(w) != w or w < 1:
            raise ValueError("sma needs an integer window w >= 1")
        return LinearSsmParams((w - 1) / w * one, one / w, one, zero)
    raise ValueError(f"unknown heuristic {kind!r}")
