"""Plain RNN, LSTM and GRU cells in numpy.

These are the memory cells used by memory-based temporal GNNs. The GRU
cell also has a backward pass because it can replace the linear state
update of the NAViS model in ablations. All step functions accept a
leading batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def sigmoid(z):
    """Logistic function, overflow-free for large ``|z|``."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _concat(a, b):
    return np.concatenate([a, b], axis=-1)


def _check(h, x, d):
    if np.shape(h)[-1] != d or np.shape(x)[-1] != d:
        raise ValueError(f"cell expects state and input of size {d}")


@dataclass
class RnnParams:
    W_h: np.ndarray  # (d, d)
    W_x: np.ndarray  # (d, d)
    b: np.ndarray

    @property
    def d(self) -> int:
        return self.b.shape[0]


@dataclass
class LstmParams:
    W_i: np.ndarray  # (d, 2d), acting on [h; x]
    W_f: np.ndarray
    W_o: np.ndarray
    W_g: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_g: np.ndarray

    @property
    def d(self) -> int:
        return self.b_i.shape[0]


@dataclass
class GruParams:
    W_z: np.ndarray  # (d, 2d), acting on [h; x]
    W_r: np.ndarray
    W: np.ndarray  # acting on [r * h; x]
    b_z: np.ndarray
    b_r: np.ndarray
    b: np.ndarray

    @property
    def d(self) -> int:
        return self.b_z.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"gru_W_z": self.W_z, "gru_W_r": self.W_r, "gru_W": self.W,
                "gru_b_z": self.b_z, "gru_b_r": self.b_r, "gru_b": self.b}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "GruParams":
        return cls(arrays["gru_W_z"], arrays["gru_W_r"], arrays["gru_W"],
                   arrays["gru_b_z"], arrays["gru_b_r"], arrays["gru_b"])


def random_rnn(d: int, rng: np.random.Generator, scale: float = 1.0) -> RnnParams:
    return RnnParams(rng.normal(0, scale, (d, d)), rng.normal(0, scale, (d, d)), rng.normal(0, scale, d))


def random_lstm(d: int, rng: np.random.Generator, scale: float = 1.0) -> LstmParams:
    mats = [rng.normal(0, scale, (d, 2 * d)) for _ in range(4)]
    biases = [rng.normal(0, scale, d) for _ in range(4)]
    return LstmParams(*mats, *biases)


def init_gru(d: int, rng: np.random.Generator, bound: float | None = None) -> GruParams:
    """Uniform initialization; the default bound is ``1/sqrt(2d)`` (fan-in)."""
    r = 1.0 / np.sqrt(2 * d) if bound is None else bound
    mats = [rng.uniform(-r, r, (d, 2 * d)) for _ in range(3)]
    biases = [rng.uniform(-r, r, d) for _ in range(3)]
    return GruParams(*mats, *biases)


def rnn_step(p: RnnParams, h_prev, x):
    _check(h_prev, x, p.d)
    return np.tanh(h_prev @ p.W_h.T + x @ p.W_x.T + p.b)


def lstm_step(p: LstmParams, h_prev, c_prev, x):
    """Returns ``(h, c)``."""
    _check(h_prev, x, p.d)
    inp = _concat(h_prev, x)
    i = sigmoid(inp @ p.W_i.T + p.b_i)
    f = sigmoid(inp @ p.W_f.T + p.b_f)
    o = sigmoid(inp @ p.W_o.T + p.b_o)
    g = np.tanh(inp @ p.W_g.T + p.b_g)
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def gru_step(p: GruParams, h_prev, x, return_cache: bool = False):
    _check(h_prev, x, p.d)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    inp = _concat(h_prev, x)
    z = sigmoid(inp @ p.W_z.T + p.b_z)
    r = sigmoid(inp @ p.W_r.T + p.b_r)
    cand_in = _concat(r * h_prev, x)
    h_tilde = np.tanh(cand_in @ p.W.T + p.b)
    h = (1.0 - z) * h_prev + z * h_tilde
    if return_cache:
        return h, (h_prev, x, inp, z, r, cand_in, h_tilde)
    return h


def gru_backward(p: GruParams, cache, dh):
    """Gradients of :func:`gru_step` given ``dL/dh``.

    Returns ``(param_grads, dx, dh_prev)``; parameter gradients are summed
    over the batch dimension.
    """
    h_prev, x, inp, z, r, cand_in, h_tilde = cache
    d = p.d
    dz = dh * (h_tilde - h_prev)
    dh_tilde = dh * z
    dh_prev = dh * (1.0 - z)

    dpre_c = dh_tilde * (1.0 - h_tilde**2)
    dcand_in = dpre_c @ p.W
    d_rh = dcand_in[..., :d]
    dx = dcand_in[..., d:].copy()
    dr = d_rh * h_prev
    dh_prev = dh_prev + d_rh * r

    dpre_r = dr * r * (1.0 - r)
    dpre_z = dz * z * (1.0 - z)
    dinp = dpre_r @ p.W_r + dpre_z @ p.W_z
    dh_prev = dh_prev + dinp[..., :d]
    dx = dx + dinp[..., d:]

    def outer(a, b):
        return np.atleast_2d(a).T @ np.atleast_2d(b)

    grads = {
        "gru_W_z": outer(dpre_z, inp),
        "gru_W_r": outer(dpre_r, inp),
        "gru_W": outer(dpre_c, cand_in),
        "gru_b_z": np.atleast_2d(dpre_z).sum(axis=0),
        "gru_b_r": np.atleast_2d(dpre_r).sum(axis=0),
        "gru_b": np.atleast_2d(dpre_c).sum(axis=0),
    }
    return grads, dx, dh_prev
