"""The NAViS forecaster: gated linear per-node state plus a global vector.

One step, for previous affinity vector ``x``, previous node state ``h_prev``
and global vector ``g``::

    z_h = sigmoid(w_xh . x + w_hh . h_prev + b_h)
    h   = z_h * h_prev + (1 - z_h) * x
    z_s = sigmoid(w_xs . x + w_hs . h + w_gs . g + b_s)
    s   = z_s * h + (1 - z_s) * x

The ``w_*`` rows are inner products that produce one scalar per step,
broadcast against the length-d biases. With ``projection="elementwise"``
they act entrywise instead. ``state_update="gru"`` swaps the first two
lines for a GRU cell and keeps the output gate.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import cells
from .cells import GruParams, sigmoid
from .ctdg import normalize_rows

ROW_NAMES = ("w_xh", "w_hh", "w_xs", "w_hs", "w_gs")
BIAS_NAMES = ("b_h", "b_s")
PARAM_NAMES = ROW_NAMES + BIAS_NAMES
INIT_SCHEMES = ("fan-in", "sqrt-d")


@dataclass
class NavisParams:
    w_xh: np.ndarray
    w_hh: np.ndarray
    w_xs: np.ndarray
    w_hs: np.ndarray
    w_gs: np.ndarray
    b_h: np.ndarray
    b_s: np.ndarray

    def __post_init__(self):
        d = len(self.b_h)
        for name in PARAM_NAMES:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (d,):
                raise ValueError(f"{name} must have shape ({d},), got {arr.shape}")
            setattr(self, name, arr)

    @property
    def d(self) -> int:
        return len(self.b_h)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "NavisParams":
        return cls(**{name: arrays[name] for name in PARAM_NAMES})

    @classmethod
    def zeros(cls, d: int) -> "NavisParams":
        return cls(*(np.zeros(d) for _ in PARAM_NAMES))


def init_bound(d: int, scheme: str = "fan-in") -> float:
    if scheme == "fan-in":
        return 1.0 / np.sqrt(d)
    if scheme == "sqrt-d":
        return float(np.sqrt(d))
    raise ValueError(f"unknown init scheme {scheme!r}")


def init_params(d: int, scheme: str = "fan-in", seed: int = 0) -> NavisParams:
    """Uniform initialization of all rows and biases, drawn in a fixed order."""
    if d < 1:
        raise ValueError("d must be >= 1")
    r = init_bound(d, scheme)
    rng = np.random.default_rng(seed)
    return NavisParams(*(rng.uniform(-r, r, d) for _ in PARAM_NAMES))


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def ema_parameterization(d: int, alpha: float, saturation: float = 40.0) -> NavisParams:
    """Zero weights, update gate fixed at ``alpha``, output gate saturated
    open so that ``s = h`` (an EMA with decay ``alpha``)."""
    p = NavisParams.zeros(d)
    p.b_h[:] = logit(alpha)
    p.b_s[:] = saturation
    return p


def pf_parameterization(d: int, saturation: float = 40.0) -> NavisParams:
    """Output gate saturated shut, so that ``s = x``."""
    p = NavisParams.zeros(d)
    p.b_s[:] = -saturation
    return p


@dataclass
class StepCache:
    x: np.ndarray
    h_prev: np.ndarray
    g: np.ndarray
    z_h: np.ndarray
    h: np.ndarray
    z_s: np.ndarray
    s: np.ndarray
    gru: tuple | None = None


def _project(w, v, elementwise):
    if elementwise:
        return v * w
    return (v @ w)[..., None]


def _check_inputs(d, *arrays):
    for a in arrays:
        if np.shape(a)[-1] != d:
            raise ValueError(f"expected vectors of length {d}, got shape {np.shape(a)}")
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input to NAViS step")


def _output_gate(params, h, x, g, elementwise):
    pre = (_project(params.w_xs, x, elementwise) + _project(params.w_hs, h, elementwise)
           + _project(params.w_gs, g, elementwise) + params.b_s)
    z_s = sigmoid(pre)
    return z_s, z_s * h + (1.0 - z_s) * x


def navis_forward(params: NavisParams, h_prev, x, g, elementwise: bool = False):
    """One NAViS step; arrays may carry a leading batch dimension.

    Returns ``(h, s, cache)``.
    """
    h_prev, x, g = (np.asarray(a, dtype=np.float64) for a in (h_prev, x, g))
    _check_inputs(params.d, h_prev, x, g)
    z_h = sigmoid(_project(params.w_xh, x, elementwise) + _project(params.w_hh, h_prev, elementwise) + params.b_h)
    h = z_h * h_prev + (1.0 - z_h) * x
    z_s, s = _output_gate(params, h, x, g, elementwise)
    return h, s, StepCache(x, h_prev, g, z_h, h, z_s, s)


def _row_grad(da, v):
    # da is (..., 1) for inner products, (..., d) entrywise
    return (da * v).reshape(-1, v.shape[-1]).sum(axis=0)


def _reduce_pre(dpre, elementwise):
    if elementwise:
        return dpre
    return dpre.sum(axis=-1, keepdims=True)


def _bias_grad(dpre):
    return dpre.reshape(-1, dpre.shape[-1]).sum(axis=0)


def _output_gate_backward(params, cache, ds, elementwise, grads):
    h, x, g, z_s = cache.h, cache.x, cache.g, cache.z_s
    dpre_s = ds * (h - x) * z_s * (1.0 - z_s)
    grads["b_s"] = _bias_grad(dpre_s)
    da_s = _reduce_pre(dpre_s, elementwise)
    grads["w_xs"] = _row_grad(da_s, x)
    grads["w_hs"] = _row_grad(da_s, h)
    grads["w_gs"] = _row_grad(da_s, g)
    dx = ds * (1.0 - z_s) + da_s * params.w_xs
    dh = ds * z_s + da_s * params.w_hs
    return dx, dh


def navis_backward(params: NavisParams, cache: StepCache, ds, elementwise: bool = False):
    """Exact gradients of one :func:`navis_forward` step.

    Returns ``(grads, dx, dh_prev)`` where ``grads`` maps parameter names to
    gradients summed over any batch dimension.
    """
    ds = np.asarray(ds, dtype=np.float64)
    grads: dict[str, np.ndarray] = {}
    dx, dh = _output_gate_backward(params, cache, ds, elementwise, grads)
    x, h_prev, z_h = cache.x, cache.h_prev, cache.z_h
    dpre_h = dh * (h_prev - x) * z_h * (1.0 - z_h)
    grads["b_h"] = _bias_grad(dpre_h)
    da_h = _reduce_pre(dpre_h, elementwise)
    grads["w_xh"] = _row_grad(da_h, x)
    grads["w_hh"] = _row_grad(da_h, h_prev)
    dx = dx + dh * (1.0 - z_h) + da_h * params.w_xh
    dh_prev = dh * z_h + da_h * params.w_hh
    return {name: grads[name] for name in PARAM_NAMES}, dx, dh_prev


class NavisModel:
    """Parameters plus the architectural switches used in ablations.

    ``params`` is a flat dict of named arrays (the optimizer works on it
    directly). For ``state_update="gru"`` the update-gate rows ``w_xh``,
    ``w_hh``, ``b_h`` are absent and GRU matrices take their place.
    """

    def __init__(self, d: int, state_update: str = "linear", projection: str = "inner",
                 use_global: bool = True, init: str = "fan-in", seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        if state_update not in ("linear", "gru"):
            raise ValueError(f"unknown state_update {state_update!r}")
        if projection not in ("inner", "elementwise"):
            raise ValueError(f"unknown projection {projection!r}")
        self.d = d
        self.state_update = state_update
        self.projection = projection
        self.use_global = use_global
        if params is None:
            params = init_params(d, init, seed).arrays()
            if state_update == "gru":
                for name in ("w_xh", "w_hh", "b_h"):
                    del params[name]
                rng = np.random.default_rng([seed, 1])
                bound = None if init == "fan-in" else float(np.sqrt(2 * d))
                params.update(cells.init_gru(d, rng, bound).arrays())
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    @property
    def elementwise(self) -> bool:
        return self.projection == "elementwise"

    def describe(self) -> dict:
        return {"d": self.d, "state_update": self.state_update,
                "projection": self.projection, "use_global": self.use_global}

    def copy(self) -> "NavisModel":
        return NavisModel(self.d, self.state_update, self.projection, self.use_global,
                          params={k: v.copy() for k, v in self.params.items()})

    def _gate_params(self) -> NavisParams:
        p = self.params
        if self.state_update == "linear":
            return NavisParams.from_arrays(p)
        z = np.zeros(self.d)
        return NavisParams(z, z, p["w_xs"], p["w_hs"], p["w_gs"], z, p["b_s"])

    def forward(self, h_prev, x, g):
        if not self.use_global:
            g = np.zeros_like(np.asarray(g, dtype=np.float64))
        if self.state_update == "linear":
            return navis_forward(self._gate_params(), h_prev, x, g, self.elementwise)
        h_prev, x, g = (np.asarray(a, dtype=np.float64) for a in (h_prev, x, g))
        _check_inputs(self.d, h_prev, x, g)
        gru = GruParams.from_arrays(self.params)
        h, gcache = cells.gru_step(gru, h_prev, x, return_cache=True)
        z_s, s = _output_gate(self._gate_params(), h, x, g, self.elementwise)
        return h, s, StepCache(x, h_prev, g, None, h, z_s, s, gru=gcache)

    def backward(self, cache: StepCache, ds):
        if self.state_update == "linear":
            return navis_backward(self._gate_params(), cache, ds, self.elementwise)
        grads: dict[str, np.ndarray] = {}
        dx, dh = _output_gate_backward(self._gate_params(), cache, np.asarray(ds, dtype=np.float64),
                                       self.elementwise, grads)
        ggrads, dx_cell, dh_prev = cells.gru_backward(GruParams.from_arrays(self.params), cache.gru, dh)
        grads.update(ggrads)
        return {k: grads[k] for k in self.params}, dx + dx_cell, dh_prev


# ---------------------------------------------------------------------------
# Streaming state
# ---------------------------------------------------------------------------


class GlobalBuffer:
    """FIFO of the ``capacity`` most recent affinity vectors seen anywhere."""

    def __init__(self, d: int, capacity: int = 200, mode: str = "most-recent"):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        if mode not in ("most-recent", "mean"):
            raise ValueError(f"unknown aggregation mode {mode!r}")
        self.d = d
        self.mode = mode
        self.items: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.items)

    def push(self, y) -> None:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.d,):
            raise ValueError(f"expected a vector of length {self.d}")
        self.items.append(y.copy())

    def extend(self, rows) -> None:
        for y in np.atleast_2d(rows):
            self.push(y)

    def aggregate(self) -> np.ndarray:
        if not self.items:
            return np.zeros(self.d)
        if self.mode == "most-recent":
            return self.items[-1].copy()
        return np.mean(np.stack(self.items), axis=0)


def update_global_buffer(buffer: GlobalBuffer, y_prev) -> GlobalBuffer:
    buffer.push(y_prev)
    return buffer


def aggregate_global(buffer: GlobalBuffer) -> np.ndarray:
    return buffer.aggregate()


@dataclass
class NodeStateTable:
    """Per-node hidden state, last ground-truth vector and estimate counts.

    Rows are allocated lazily (all-zero) the first time a node id is seen.
    """

    d: int
    rows: dict[int, int] = field(default_factory=dict)
    h: np.ndarray = None
    last_x: np.ndarray = None
    acc: np.ndarray = None
    last_time: np.ndarray = None
    skipped_events: int = 0

    def __post_init__(self):
        if self.h is None:
            self.h = np.zeros((0, self.d))
            self.last_x = np.zeros((0, self.d))
            self.acc = np.zeros((0, self.d))
            self.last_time = np.zeros(0)

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, node) -> bool:
        return int(node) in self.rows

    def _grow(self, n: int) -> None:
        cap = len(self.h)
        if n <= cap:
            return
        new = max(n, 2 * cap, 16)
        for name in ("h", "last_x", "acc"):
            arr = getattr(self, name)
            grown = np.zeros((new, self.d))
            grown[:cap] = arr
            setattr(self, name, grown)
        t = np.full(new, -np.inf)
        t[:cap] = self.last_time
        self.last_time = t

    def lookup(self, nodes) -> np.ndarray:
        out = np.empty(len(nodes), dtype=np.int64)
        for i, v in enumerate(nodes):
            v = int(v)
            r = self.rows.get(v)
            if r is None:
                r = self.rows[v] = len(self.rows)
            out[i] = r
        self._grow(len(self.rows))
        return out

    def accumulate(self, sources, positions, weights) -> None:
        """Add event weights into the estimate counts of their sources.

        Events with ``position < 0`` (destination outside the candidates)
        are skipped and counted.
        """
        positions = np.asarray(positions)
        keep = positions >= 0
        self.skipped_events += int(np.count_nonzero(~keep))
        if not np.any(keep):
            return
        rows = self.lookup(np.asarray(sources)[keep])
        np.add.at(self.acc, (rows, positions[keep]), np.asarray(weights, dtype=np.float64)[keep])

    def take_estimates(self, rows) -> np.ndarray:
        """Finalize and reset the estimate counts of ``rows``."""
        out = normalize_rows(self.acc[rows])
        self.acc[rows] = 0.0
        return out


SETTINGS = ("ground-truth-inputs", "full-ctdg")


def predict_affinity(model: NavisModel, table: NodeStateTable, buffer: GlobalBuffer, node: int,
                     setting: str = "ground-truth-inputs", time: float | None = None) -> np.ndarray:
    """Predict one node's next affinity vector and advance its state."""
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    (row,) = table.lookup([node])
    if setting == "ground-truth-inputs":
        x = table.last_x[row].copy()
    else:
        x = table.take_estimates([row])[0]
    h, s, _ = model.forward(table.h[row], x, buffer.aggregate())
    table.h[row] = h
    if time is not None:
        table.last_time[row] = time
    if setting == "full-ctdg":
        buffer.push(x)
    return s


def observe_ground_truth(table: NodeStateTable, buffer: GlobalBuffer, node: int, y) -> None:
    """Reveal a node's realized affinity vector after its prediction."""
    (row,) = table.lookup([node])
    table.last_x[row] = y
    buffer.push(y)
