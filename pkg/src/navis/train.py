"""Adam, the chronological streaming loop, training, evaluation, baselines
and the ablation grid.

Queries are processed in time groups (all queries sharing a timestamp).
Inside a group every prediction reads the same snapshot of node states
and global buffer; state writes land after the group. Node states are
never reset between the train, validation and test portions: evaluation
always replays the stream from the start.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import loss as losses
from .ctdg import Dataset, normalize_rows, split_counts
from .heuristics import fit_ar1_series
from .model import SETTINGS, GlobalBuffer, NavisModel, NodeStateTable

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PORTIONS = ("train", "val", "test")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 200
    epochs: int = 50
    margin: float = 1e-3
    top_k: int = 20
    sigma: float = 1.0
    gain: str = "literal"
    init: str = "fan-in"
    buffer_size: int = 200
    aggregation: str = "most-recent"
    setting: str = "ground-truth-inputs"
    loss: str = "rank+reg"
    state_update: str = "linear"
    projection: str = "inner"
    use_global: bool = True
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    eval_k: int = 10
    seed: int = 0

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        for name in ("lr", "batch_size", "epochs", "top_k", "sigma", "buffer_size", "eval_k"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.loss not in losses.LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.gain not in losses.GAIN_MODES:
            raise ValueError(f"unknown gain {self.gain!r}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        data = asdict(self)
        data.update(changes)
        return TrainConfig(**data)


def _coerce(field_type, text: str):
    t = str(field_type)
    if "None" in t and text.strip().lower() in ("none", "null"):
        return None
    t = t.replace(" | None", "")
    if "bool" in t:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if "tuple" in t:
        return tuple(float(v) for v in text.split(","))
    if t in ("int", "<class 'int'>"):
        return int(text)
    if t in ("float", "<class 'float'>"):
        return float(text)
    return text


def apply_overrides(config, overrides: list[str] | dict):
    """Apply ``key=value`` strings (or a dict) on top of a config dataclass."""
    types = {f.name: f.type for f in fields(config)}
    changes = {}
    items = overrides.items() if isinstance(overrides, dict) else (o.split("=", 1) for o in overrides)
    for item in items:
        if len(item) != 2:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, value = item
        key = key.strip().replace("-", "_")
        if key not in types:
            raise KeyError(f"unknown config key {key!r}")
        changes[key] = _coerce(types[key], value) if isinstance(value, str) else value
    return dataclasses.replace(config, **changes)


def load_config(path: str | Path | None, overrides=(), base=None):
    """JSON config file, then ``key=value`` overrides; flags win."""
    config = TrainConfig() if base is None else base
    if path is not None:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        config = apply_overrides(config, data)
    return apply_overrides(config, list(overrides))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """Bias-corrected Adam step, in place. Non-finite gradients skip the step."""
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        logger.warning("non-finite gradient, optimizer step skipped (%d so far)", state.skipped)
        return params, state
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        params[k] -= lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# Streaming
# ---------------------------------------------------------------------------


def split_bounds(dataset: Dataset, fractions=(0.7, 0.15, 0.15)) -> dict[str, tuple[int, int]]:
    """Query index ranges of the chronological portions."""
    seq = dataset.labels
    periods = seq.periods()
    n_train, n_val, _ = split_counts(len(periods), fractions)
    a = int(np.searchsorted(seq.bucket, periods[n_train], side="left"))
    b = int(np.searchsorted(seq.bucket, periods[n_train + n_val], side="left"))
    return {"train": (0, a), "val": (a, b), "test": (b, len(seq))}


class Stream:
    """Replays a dataset's queries in time groups, tracking inputs."""

    def __init__(self, dataset: Dataset, setting: str, buffer_size: int = 200,
                 aggregation: str = "most-recent"):
        if setting not in SETTINGS:
            raise ValueError(f"unknown setting {setting!r}")
        self.dataset = dataset
        self.setting = setting
        self.buffer_size = buffer_size
        self.aggregation = aggregation
        seq = dataset.labels
        if len(seq) and np.any(np.diff(seq.time) < 0):
            raise ValueError("labeled queries must be sorted by time")
        cuts = np.flatnonzero(np.diff(seq.time)) + 1
        self.group_starts = np.concatenate([[0], cuts, [len(seq)]]).astype(np.int64)
        self._event_pos = dataset.index.lookup(dataset.events.dests) if setting == "full-ctdg" else None
        self.reset()

    def reset(self) -> None:
        d = self.dataset.index.d
        self.table = NodeStateTable(d)
        self.buffer = GlobalBuffer(d, self.buffer_size, self.aggregation)
        self.event_ptr = 0

    def groups(self, start: int, stop: int):
        starts = self.group_starts
        i = int(np.searchsorted(starts, start, side="right")) - 1
        while i < len(starts) - 1 and starts[i] < stop:
            lo, hi = max(int(starts[i]), start), min(int(starts[i + 1]), stop)
            if lo < hi:
                yield lo, hi
            i += 1

    def inputs(self, lo: int, hi: int):
        """Rows, previous-vector inputs and global vector for one group."""
        seq = self.dataset.labels
        rows = self.table.lookup(seq.node[lo:hi])
        if self.setting == "ground-truth-inputs":
            x = self.table.last_x[rows].copy()
        else:
            cursor = int(seq.cursor[lo])
            ev = self.dataset.events
            sl = slice(self.event_ptr, max(self.event_ptr, cursor))
            self.table.accumulate(ev.sources[sl], self._event_pos[sl], ev.weights[sl])
            self.event_ptr = max(self.event_ptr, cursor)
            x = self.table.take_estimates(rows)
        return rows, x, self.buffer.aggregate()

    def commit(self, lo: int, hi: int, rows, h, x) -> None:
        seq = self.dataset.labels
        if h is not None:
            self.table.h[rows] = h
        self.table.last_time[rows] = seq.time[lo:hi]
        if self.setting == "ground-truth-inputs":
            revealed = seq.labels[lo:hi]
            self.table.last_x[rows] = revealed
        else:
            revealed = x
        for vec in revealed:
            if vec.any():
                self.buffer.push(vec)


@dataclass
class EvalResult:
    ndcg: float
    loss: float
    l1: float
    count: int

    def to_dict(self) -> dict:
        return asdict(self)


def l1_error(pred, y) -> np.ndarray:
    """Per-row L1 distance between the normalized prediction and ``y``."""
    return np.abs(normalize_rows(np.maximum(pred, 0.0)) - y).sum(axis=-1)


class _Scores:
    def __init__(self, k: int):
        self.k = k
        self.ndcg, self.loss, self.l1, self.count = 0.0, 0.0, 0.0, 0

    def add(self, s, y, loss_values=None):
        keep = y.sum(axis=-1) > 0
        if not np.any(keep):
            return
        self.ndcg += float(np.sum(losses.ndcg_at_k(s[keep], y[keep], self.k)))
        self.l1 += float(np.sum(l1_error(s[keep], y[keep])))
        if loss_values is not None:
            self.loss += float(np.sum(np.asarray(loss_values)[keep]))
        self.count += int(np.count_nonzero(keep))

    def result(self) -> EvalResult:
        n = max(self.count, 1)
        return EvalResult(self.ndcg / n, self.loss / n, self.l1 / n, self.count)


def _loss_and_grad(config: TrainConfig, s, y):
    return losses.total_loss(s, y, margin=config.margin, kind=config.loss, sigma=config.sigma,
                             top_k=config.top_k, gain=config.gain)


def build_model(config: TrainConfig, d: int) -> NavisModel:
    return NavisModel(d, state_update=config.state_update, projection=config.projection,
                      use_global=config.use_global, init=config.init, seed=config.seed)


def evaluate(model: NavisModel, dataset: Dataset, portion: str = "test",
             config: TrainConfig | None = None) -> EvalResult:
    """Replay the stream from the start with fixed parameters and score one
    portion: mean NDCG@k, loss and L1 error over queries with a non-zero
    ground truth."""
    config = config or TrainConfig()
    bounds = split_bounds(dataset, config.fractions)
    lo_p, hi_p = bounds[portion]
    stream = Stream(dataset, config.setting, config.buffer_size, config.aggregation)
    scores = _Scores(config.eval_k)
    y_all = dataset.labels.labels
    for lo, hi in stream.groups(0, hi_p):
        rows, x, g = stream.inputs(lo, hi)
        h, s, _ = model.forward(stream.table.h[rows], x, g)
        if lo >= lo_p:
            y = y_all[lo:hi]
            scores.add(s, y, _loss_and_grad(config, s, y)[0])
        stream.commit(lo, hi, rows, h, x)
    return scores.result()


@dataclass
class TrainResult:
    model: NavisModel
    adam: AdamState
    best_epoch: int
    best_val: float
    history: list[dict]
    config: TrainConfig


def train(config: TrainConfig, dataset: Dataset, log=None) -> TrainResult:
    """Fit a NAViS model on the train portion; keep the best-validation epoch.

    ``log`` receives one dict per (epoch, split) record.
    """
    bounds = split_bounds(dataset, config.fractions)
    t_lo, t_hi = bounds["train"]
    if t_hi <= t_lo:
        raise ValueError("empty training portion")
    if bounds["val"][1] <= bounds["val"][0]:
        raise ValueError("empty validation portion")
    val_start_time = dataset.labels.time[bounds["val"][0]]
    val_start_cursor = dataset.labels.cursor[bounds["val"][0]]
    model = build_model(config, dataset.index.d)
    adam = AdamState()
    stream = Stream(dataset, config.setting, config.buffer_size, config.aggregation)
    y_all = dataset.labels.labels
    history: list[dict] = []
    best = (-math.inf, 0, None, None)

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        stream.reset()
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        in_batch = 0
        epoch_loss, epoch_q = 0.0, 0
        scores = _Scores(config.eval_k)
        for lo, hi in stream.groups(t_lo, t_hi):
            assert dataset.labels.time[lo] < val_start_time, "training read past the validation boundary"
            rows, x, g = stream.inputs(lo, hi)
            assert stream.event_ptr <= val_start_cursor, "training consumed validation-period events"
            h, s, cache = model.forward(stream.table.h[rows], x, g)
            y = y_all[lo:hi]
            values, ds = _loss_and_grad(config, s, y)
            epoch_loss += float(np.sum(values))
            epoch_q += hi - lo
            scores.add(s, y)
            start = 0
            n = hi - lo
            while start < n:
                take = min(n - start, config.batch_size - in_batch)
                mask = np.zeros((n, 1))
                mask[start:start + take] = 1.0
                part = model.backward(cache, ds * mask)[0]
                for k in grads:
                    grads[k] += part[k]
                in_batch += take
                start += take
                if in_batch == config.batch_size:
                    _step(model, grads, adam, config.lr, in_batch)
                    in_batch = 0
            stream.commit(lo, hi, rows, h, x)
        if in_batch:
            _step(model, grads, adam, config.lr, in_batch)
        train_rec = {"epoch": epoch, "split": "train", "loss": epoch_loss / max(epoch_q, 1),
                     "ndcg@10": scores.result().ndcg, "queries": epoch_q}
        val = evaluate(model, dataset, "val", config)
        val_rec = {"epoch": epoch, "split": "val", "loss": val.loss, "ndcg@10": val.ndcg,
                   "queries": val.count}
        wall = time.perf_counter() - t0
        for rec in (train_rec, val_rec):
            history.append(rec)
            if log is not None:
                log(rec, wall)
        if val.ndcg > best[0]:
            best = (val.ndcg, epoch, model.copy(), copy.deepcopy(adam))
    best_val, best_epoch, best_model, best_adam = best
    return TrainResult(best_model, best_adam, best_epoch, best_val, history, config)


def _step(model, grads, adam, lr, count):
    mean = {k: g / count for k, g in grads.items()}
    adam_update(model.params, mean, adam, lr)
    for g in grads.values():
        g[:] = 0.0


def train_seeds(config: TrainConfig, dataset: Dataset, seeds=(0, 1, 2)) -> dict:
    """Multi-seed protocol: test score of each run's best checkpoint."""
    tests, vals = [], []
    for seed in seeds:
        result = train(config.replace(seed=seed), dataset)
        vals.append(result.best_val)
        tests.append(evaluate(result.model, dataset, "test", result.config).ndcg)
    return {"seeds": list(seeds), "val": vals, "test": tests,
            "test_mean": float(np.mean(tests)), "test_std": float(np.std(tests))}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: NavisModel, adam: AdamState | None = None,
                    config: TrainConfig | None = None, extra: dict | None = None) -> Path:
    """Write an ``.npz`` archive: ``param/*``, ``adam_m/*``, ``adam_v/*`` and
    a JSON ``meta`` string (format version, model switches, optimizer
    scalars, config and its hash)."""
    path = Path(path)
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    adam = adam or AdamState()
    arrays.update({f"adam_m/{k}": v for k, v in adam.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in adam.v.items()})
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model": model.describe(),
        "adam": {"t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
                 "skipped": adam.skipped},
        "config": config.to_dict() if config else None,
        "config_hash": config.digest() if config else None,
        "extra": extra or {},
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path):
    """Returns ``(model, adam_state, config_or_None, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        m = {k[len("adam_m/"):]: data[k] for k in data.files if k.startswith("adam_m/")}
        v = {k[len("adam_v/"):]: data[k] for k in data.files if k.startswith("adam_v/")}
    desc = meta["model"]
    model = NavisModel(desc["d"], desc["state_update"], desc["projection"], desc["use_global"], params=params)
    a = meta["adam"]
    adam = AdamState(m, v, a["t"], a["beta1"], a["beta2"], a["eps"], a["skipped"])
    config = TrainConfig(**meta["config"]) if meta.get("config") else None
    return model, adam, config, meta


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

BASELINES = ("pf", "ema", "sma", "ar1", "historical", "moving-avg")


def evaluate_baseline(method: str, dataset: Dataset, portion: str = "test",
                      setting: str = "ground-truth-inputs", alpha: float = 0.2, window: int = 5,
                      moving_avg: str = "ema", fractions=(0.7, 0.15, 0.15), k: int = 10) -> EvalResult:
    """Score a heuristic forecaster on one portion of the stream.

    Moving averages update on each revealed vector and predict their state;
    ``ar1`` is fitted per node on the training portion; ``historical`` is
    the mean past interaction weight and always reads the raw events.
    """
    if method == "moving-avg":
        method = moving_avg
    if method not in BASELINES:
        raise ValueError(f"unknown baseline {method!r}")
    bounds = split_bounds(dataset, fractions)
    lo_p, hi_p = bounds[portion]
    seq = dataset.labels
    d = dataset.index.d
    if method == "historical":
        return _historical_baseline(dataset, lo_p, hi_p, k)

    coeffs = {}
    if method == "ar1":
        t_lo, t_hi = bounds["train"]
        for node in np.unique(seq.node[t_lo:t_hi]):
            series = seq.labels[t_lo:t_hi][seq.node[t_lo:t_hi] == node]
            if len(series) >= 2:
                coeffs[int(node)] = fit_ar1_series(series)
    keep = {"ema": alpha, "sma": (window - 1) / window}.get(method)

    stream = Stream(dataset, setting)
    state = np.zeros((0, d))
    scores = _Scores(k)
    for lo, hi in stream.groups(0, hi_p):
        rows, x, _ = stream.inputs(lo, hi)
        if len(state) < len(stream.table.h):
            state = np.concatenate([state, np.zeros((len(stream.table.h) - len(state), d))])
        if setting == "full-ctdg" and keep is not None:
            # the fresh estimate is folded in before predicting
            state[rows] = keep * state[rows] + (1 - keep) * x
        if method == "pf":
            pred = x
        elif method == "ar1":
            ab = np.array([coeffs.get(int(n), (1.0, 0.0)) for n in seq.node[lo:hi]])
            pred = np.maximum(ab[:, :1] * x + ab[:, 1:], 0.0)
        else:
            pred = state[rows]
        if lo >= lo_p:
            scores.add(pred, seq.labels[lo:hi])
        stream.commit(lo, hi, rows, None, x)
        if setting == "ground-truth-inputs" and keep is not None:
            state[rows] = keep * state[rows] + (1 - keep) * seq.labels[lo:hi]
    return scores.result()


def _historical_baseline(dataset: Dataset, lo_p: int, hi_p: int, k: int) -> EvalResult:
    seq, ev = dataset.labels, dataset.events
    d = dataset.index.d
    pos = dataset.index.lookup(ev.dests)
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, np.ndarray] = {}
    ptr = 0
    scores = _Scores(k)
    for q in range(hi_p):
        cur = int(seq.cursor[q])
        while ptr < cur:
            if pos[ptr] >= 0:
                u = int(ev.sources[ptr])
                if u not in sums:
                    sums[u], counts[u] = np.zeros(d), np.zeros(d)
                sums[u][pos[ptr]] += ev.weights[ptr]
                counts[u][pos[ptr]] += 1
            ptr += 1
        if q < lo_p:
            continue
        u = int(seq.node[q])
        if u in sums:
            pred = np.divide(sums[u], counts[u], out=np.zeros(d), where=counts[u] > 0)
        else:
            pred = np.zeros(d)
        scores.add(pred[None], seq.labels[q:q + 1])
    return scores.result()


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

ABLATION_ROWS = (
    ("linear+global+rank", dict(state_update="linear", use_global=True, loss="rank+reg")),
    ("gru-global+rank", dict(state_update="gru", use_global=False, loss="rank+reg")),
    ("linear-global+rank", dict(state_update="linear", use_global=False, loss="rank+reg")),
    ("linear+global+ce", dict(state_update="linear", use_global=True, loss="ce")),
    ("linear+global+rank-reg", dict(state_update="linear", use_global=True, loss="rank")),
)


def run_ablation(base: TrainConfig, dataset: Dataset, seeds=(0,)) -> list[dict]:
    """Train every ablation row and report validation/test NDCG@k (mean
    over ``seeds``)."""
    table = []
    for label, changes in ABLATION_ROWS:
        cfg = base.replace(**changes)
        vals, tests = [], []
        for seed in seeds:
            result = train(cfg.replace(seed=seed), dataset)
            vals.append(result.best_val)
            tests.append(evaluate(result.model, dataset, "test", result.config).ndcg)
        table.append({"row": label, **changes, "val": float(np.mean(vals)),
                      "test": float(np.mean(tests)), "test_std": float(np.std(tests))})
    return table
