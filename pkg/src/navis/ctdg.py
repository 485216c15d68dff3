"""Continuous-time dynamic graph data model and dataset plumbing.

Events are stored column-wise (numpy arrays) but can be iterated as
:class:`InteractionEvent` records. Affinity vectors are plain 1-D float
arrays laid out over a :class:`CandidateIndex`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

EVENT_COLUMNS = ("source", "dest", "time", "weight")
LABEL_COLUMNS = ("node", "time", "cursor", "dest", "value")
MANIFEST_VERSION = 1
CANDIDATE_MODES = ("all-nodes", "destinations-only")


class DataError(ValueError):
    """Base class for malformed dataset input."""


class EventParseError(DataError):
    def __init__(self, row: int, line: int, reason: str):
        super().__init__(f"row {row} (line {line}): {reason}")
        self.row = row
        self.line = line


class EventOrderError(DataError):
    def __init__(self, row: int, line: int, prev: float, cur: float):
        super().__init__(
            f"row {row} (line {line}): time {cur!r} precedes previous time {prev!r}"
        )
        self.row = row
        self.line = line


class EmptyCandidateError(DataError):
    pass


class SplitError(DataError):
    pass


@dataclass(frozen=True)
class InteractionEvent:
    source: int
    dest: int
    time: float
    weight: float


class EventStream(Sequence):
    """Time-ordered interaction events plus the registry of node ids seen.

    ``nodes`` lists every id in first-appearance order (source before dest
    within a row).
    """

    def __init__(self, sources, dests, times, weights, nodes: Iterable[int] | None = None):
        self.sources = np.asarray(sources, dtype=np.int64)
        self.dests = np.asarray(dests, dtype=np.int64)
        self.times = np.asarray(times, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        n = len(self.times)
        if not (len(self.sources) == len(self.dests) == len(self.weights) == n):
            raise DataError("event columns have different lengths")
        if n and np.any(np.diff(self.times) < 0):
            bad = int(np.flatnonzero(np.diff(self.times) < 0)[0]) + 1
            raise EventOrderError(bad + 1, bad + 2, float(self.times[bad - 1]), float(self.times[bad]))
        if nodes is None:
            interleaved = np.empty(2 * n, dtype=np.int64)
            interleaved[0::2] = self.sources
            interleaved[1::2] = self.dests
            _, first = np.unique(interleaved, return_index=True)
            nodes = interleaved[np.sort(first)]
        self.nodes = [int(v) for v in nodes]

    @classmethod
    def from_events(cls, events: Iterable[InteractionEvent]) -> "EventStream":
        events = list(events)
        return cls(
            [e.source for e in events],
            [e.dest for e in events],
            [e.time for e in events],
            [e.weight for e in events],
        )

    def __len__(self) -> int:
        return len(self.times)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return EventStream(self.sources[i], self.dests[i], self.times[i], self.weights[i])
        return InteractionEvent(
            int(self.sources[i]), int(self.dests[i]), float(self.times[i]), float(self.weights[i])
        )

    def __iter__(self) -> Iterator[InteractionEvent]:
        for i in range(len(self)):
            yield self[i]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.sources, self.dests, self.times, self.weights):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def load_events(path: str | Path) -> EventStream:
    """Read an event CSV with header ``source,dest,time,weight``.

    Rows must already be sorted by time; a regression raises
    :class:`EventOrderError` naming the offending row rather than re-sorting.
    """
    sources, dests, times, weights = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return EventStream([], [], [], [])
        header = [c.strip() for c in header]
        if sorted(header) != sorted(EVENT_COLUMNS):
            raise EventParseError(0, 1, f"expected header {','.join(EVENT_COLUMNS)}, got {','.join(header)}")
        col = {name: header.index(name) for name in EVENT_COLUMNS}
        prev = -math.inf
        for row_no, row in enumerate(reader, start=1):
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise EventParseError(row_no, line, f"expected {len(header)} fields, got {len(row)}")
            try:
                u = int(row[col["source"]])
                v = int(row[col["dest"]])
                t = float(row[col["time"]])
                w = float(row[col["weight"]])
            except ValueError as exc:
                raise EventParseError(row_no, line, str(exc)) from None
            if u < 0 or v < 0:
                raise EventParseError(row_no, line, "node ids must be non-negative")
            if not (math.isfinite(t) and t >= 0):
                raise EventParseError(row_no, line, f"invalid time {t!r}")
            if not math.isfinite(w):
                raise EventParseError(row_no, line, f"invalid weight {w!r}")
            if t < prev:
                raise EventOrderError(row_no, line, prev, t)
            prev = t
            sources.append(u)
            dests.append(v)
            times.append(t)
            weights.append(w)
    return EventStream(sources, dests, times, weights)


def save_events(events: EventStream, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVENT_COLUMNS)
        for e in events:
            writer.writerow([e.source, e.dest, repr(e.time), repr(e.weight)])


class CandidateIndex:
    """Bijection between node ids and dense positions ``0..d-1``."""

    def __init__(self, ids: Iterable[int]):
        self.ids = np.asarray(list(ids), dtype=np.int64)
        self._pos = {int(v): i for i, v in enumerate(self.ids)}
        if len(self._pos) != len(self.ids):
            raise DataError("candidate ids must be unique")
        if not self._pos:
            raise EmptyCandidateError("candidate set is empty")

    @property
    def d(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, node: int) -> bool:
        return int(node) in self._pos

    def position(self, node: int) -> int:
        return self._pos[int(node)]

    def node(self, position: int) -> int:
        return int(self.ids[position])

    def lookup(self, nodes) -> np.ndarray:
        """Vectorized ``position``; ids outside the index map to -1."""
        nodes = np.asarray(nodes, dtype=np.int64)
        return np.fromiter((self._pos.get(int(v), -1) for v in nodes), dtype=np.int64, count=len(nodes))


def build_candidate_index(events: EventStream, mode: str = "all-nodes") -> CandidateIndex:
    if mode == "all-nodes":
        if not events.nodes:
            raise EmptyCandidateError("no nodes registered")
        return CandidateIndex(events.nodes)
    if mode == "destinations-only":
        if len(events) == 0:
            raise EmptyCandidateError("destinations-only index needs at least one event")
        _, first = np.unique(events.dests, return_index=True)
        return CandidateIndex(events.dests[np.sort(first)])
    raise ValueError(f"unknown candidate mode {mode!r}")


@dataclass
class LabeledSequence:
    """Queries ordered by (time, node), each with a ground-truth affinity row.

    ``cursor[i]`` is the number of stream events strictly before
    ``time[i]``; ``bucket[i]`` is the period index used for splitting.
    """

    node: np.ndarray
    time: np.ndarray
    cursor: np.ndarray
    labels: np.ndarray
    bucket: np.ndarray
    period: float
    skipped_events: int = 0

    def __post_init__(self):
        self.node = np.asarray(self.node, dtype=np.int64)
        self.time = np.asarray(self.time, dtype=np.float64)
        self.cursor = np.asarray(self.cursor, dtype=np.int64)
        self.bucket = np.asarray(self.bucket, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.node)

    @property
    def d(self) -> int:
        return self.labels.shape[1]

    def subset(self, mask_or_slice) -> "LabeledSequence":
        return LabeledSequence(
            self.node[mask_or_slice],
            self.time[mask_or_slice],
            self.cursor[mask_or_slice],
            self.labels[mask_or_slice],
            self.bucket[mask_or_slice],
            self.period,
            self.skipped_events,
        )

    def periods(self) -> np.ndarray:
        return np.unique(self.bucket)


def aggregate_bucket_weights(
    events: EventStream, period: float, index: CandidateIndex, origin: float | None = None
) -> tuple[dict[tuple[int, int], np.ndarray], int]:
    """Per-(bucket, source) sums of event weight over candidate destinations.

    Returns the raw sums and the number of events skipped because their
    destination is outside ``index``.
    """
    if not period > 0:
        raise ValueError("period must be positive")
    if len(events) == 0:
        return {}, 0
    t0 = float(events.times[0]) if origin is None else float(origin)
    buckets = np.floor((events.times - t0) / period).astype(np.int64)
    pos = index.lookup(events.dests)
    keep = pos >= 0
    skipped = int(np.count_nonzero(~keep))
    if skipped:
        logger.warning("skipped %d events with destinations outside the candidate set", skipped)
    sums: dict[tuple[int, int], np.ndarray] = {}
    for b, u, p, w in zip(buckets[keep], events.sources[keep], pos[keep], events.weights[keep]):
        key = (int(b), int(u))
        row = sums.get(key)
        if row is None:
            row = sums[key] = np.zeros(index.d)
        row[p] += w
    return sums, skipped


def convert_links_to_affinity(
    events: EventStream, period: float, index: CandidateIndex, origin: float | None = None
) -> LabeledSequence:
    """Turn a weighted link stream into per-period affinity labels.

    Buckets start at the first event time. For every source active in a
    bucket, the label is its per-destination weight sum, negatives clipped,
    normalized to one; the query is issued at the bucket start. Sources whose
    clipped sum is zero yield no query.
    """
    sums, skipped = aggregate_bucket_weights(events, period, index, origin)
    t0 = (float(events.times[0]) if len(events) else 0.0) if origin is None else float(origin)
    rows = []
    for (b, u), raw in sorted(sums.items()):
        clipped = np.clip(raw, 0.0, None)
        total = clipped.sum()
        if total <= 0:
            continue
        rows.append((b, u, clipped / total))
    if not rows:
        return LabeledSequence(
            np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64),
            np.zeros((0, index.d)), np.zeros(0, np.int64), period, skipped,
        )
    bucket = np.array([r[0] for r in rows], dtype=np.int64)
    node = np.array([r[1] for r in rows], dtype=np.int64)
    time = t0 + bucket * period
    cursor = np.searchsorted(events.times, time, side="left")
    labels = np.stack([r[2] for r in rows])
    return LabeledSequence(node, time, cursor, labels, bucket, period, skipped)


@dataclass
class EstimateAccumulator:
    """Running weighted interaction counts of one source node."""

    raw: np.ndarray
    skipped: int = 0

    @classmethod
    def zeros(cls, d: int) -> "EstimateAccumulator":
        return cls(np.zeros(d))


def accumulate_estimate(acc: EstimateAccumulator, event: InteractionEvent, index: CandidateIndex) -> EstimateAccumulator:
    if event.dest not in index:
        acc.skipped += 1
        return acc
    acc.raw[index.position(event.dest)] += event.weight
    return acc


def finalize_estimate(acc: EstimateAccumulator) -> np.ndarray:
    """Normalize the counts into an affinity vector and reset them.

    A non-positive total gives the all-zero vector.
    """
    out = normalize_rows(acc.raw)
    acc.raw[:] = 0.0
    return out


def normalize_rows(raw: np.ndarray) -> np.ndarray:
    """Divide each row by its sum; rows with sum <= 0 become zero."""
    raw = np.asarray(raw, dtype=np.float64)
    total = raw.sum(axis=-1, keepdims=True)
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, raw / safe, 0.0)


def split_counts(n_periods: int, fractions=(0.7, 0.15, 0.15)) -> tuple[int, int, int]:
    """Period counts per split: floor for train and val, remainder to test.

    Each split keeps at least one period.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError("fractions must be three numbers summing to 1")
    if n_periods < 3:
        raise SplitError(f"need at least 3 periods to split, got {n_periods}")
    n_train = max(1, math.floor(fractions[0] * n_periods + 1e-9))
    n_val = max(1, math.floor(fractions[1] * n_periods + 1e-9))
    while n_train + n_val > n_periods - 1:
        n_train -= 1
    return n_train, n_val, n_periods - n_train - n_val


def chronological_split(seq: LabeledSequence, fractions=(0.7, 0.15, 0.15)):
    periods = seq.periods()
    n_train, n_val, _ = split_counts(len(periods), fractions)
    val_start = periods[n_train]
    test_start = periods[n_train + n_val]
    train = seq.subset(seq.bucket < val_start)
    val = seq.subset((seq.bucket >= val_start) & (seq.bucket < test_start))
    test = seq.subset(seq.bucket >= test_start)
    return train, val, test


def is_normalized(x: np.ndarray, tol: float = 1e-9) -> bool:
    """True if every vector (row) is non-negative and sums to 1 or is all-zero."""
    x = np.asarray(x)
    if np.any(x < 0):
        return False
    total = x.sum(axis=-1)
    return bool(np.all((total == 0) | (np.abs(total - 1.0) <= tol)))


# ---------------------------------------------------------------------------
# Datasets on disk
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    name: str
    events: EventStream
    index: CandidateIndex
    labels: LabeledSequence
    candidate_mode: str = "all-nodes"
    num_nodes: int = 0
    meta: dict = field(default_factory=dict)

    def digest(self) -> str:
        h = hashlib.sha256(self.events.digest().encode())
        h.update(self.index.ids.tobytes())
        for arr in (self.labels.node, self.labels.time, self.labels.cursor, self.labels.labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def save_labels(seq: LabeledSequence, index: CandidateIndex, path: str | Path) -> None:
    """Write labels in long format, one non-zero entry per line."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LABEL_COLUMNS)
        for q in range(len(seq)):
            row = seq.labels[q]
            for p in np.flatnonzero(row):
                writer.writerow([int(seq.node[q]), repr(float(seq.time[q])), int(seq.cursor[q]),
                                 index.node(p), repr(float(row[p]))])


def load_labels(path: str | Path, index: CandidateIndex, period: float, origin: float = 0.0) -> LabeledSequence:
    entries: dict[tuple[float, int], tuple[int, dict[int, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or sorted(reader.fieldnames) != sorted(LABEL_COLUMNS):
            raise DataError(f"label file needs header {','.join(LABEL_COLUMNS)}")
        for row_no, row in enumerate(reader, start=1):
            try:
                key = (float(row["time"]), int(row["node"]))
                cursor = int(row["cursor"])
                dest = int(row["dest"])
                value = float(row["value"])
            except ValueError as exc:
                raise DataError(f"label row {row_no}: {exc}") from None
            entries.setdefault(key, (cursor, {}))[1][dest] = value
    keys = sorted(entries)
    labels = np.zeros((len(keys), index.d))
    for q, key in enumerate(keys):
        for dest, value in entries[key][1].items():
            labels[q, index.position(dest)] = value
    time = np.array([k[0] for k in keys], dtype=np.float64)
    return LabeledSequence(
        node=np.array([k[1] for k in keys], dtype=np.int64),
        time=time,
        cursor=np.array([entries[k][0] for k in keys], dtype=np.int64),
        labels=labels,
        bucket=np.floor((time - origin) / period + 1e-9).astype(np.int64),
        period=period,
    )


def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    """Write ``events.csv``, ``labels.csv`` and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_events(ds.events, directory / "events.csv")
    save_labels(ds.labels, ds.index, directory / "labels.csv")
    manifest = {
        "format_version": MANIFEST_VERSION,
        "name": ds.name,
        "num_nodes": int(ds.num_nodes or len(ds.events.nodes)),
        "candidate_mode": ds.candidate_mode,
        "candidates": [int(v) for v in ds.index.ids],
        "period": float(ds.labels.period),
        "origin": float(ds.meta.get("origin", ds.events.times[0] if len(ds.events) else 0.0)),
        "events": "events.csv",
        "labels": "labels.csv",
        "meta": ds.meta,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def dataset_from_events(events: EventStream, period: float, candidate_mode: str = "all-nodes",
                        name: str = "converted", origin: float | None = None) -> Dataset:
    """Build a dataset from a raw link stream by period bucketing."""
    if candidate_mode not in CANDIDATE_MODES:
        raise DataError(f"unknown candidate_mode {candidate_mode!r}")
    if not period > 0:
        raise DataError("period must be positive")
    index = build_candidate_index(events, candidate_mode)
    labels = convert_links_to_affinity(events, period, index, origin)
    t0 = (float(events.times[0]) if len(events) else 0.0) if origin is None else float(origin)
    return Dataset(name, events, index, labels, candidate_mode, len(events.nodes),
                   {"origin": t0, "skipped_events": int(labels.skipped_events)})


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load a dataset from its manifest.

    Without a ``labels`` entry the labels are derived from the events by
    period bucketing.
    """
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    version = manifest.get("format_version", MANIFEST_VERSION)
    if version != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {version}")
    base = manifest_path.parent
    events = load_events(base / manifest["events"])
    mode = manifest.get("candidate_mode", "all-nodes")
    if mode not in CANDIDATE_MODES:
        raise DataError(f"unknown candidate_mode {mode!r}")
    if "candidates" in manifest:
        index = CandidateIndex(manifest["candidates"])
    else:
        index = build_candidate_index(events, mode)
    period = float(manifest["period"])
    if manifest.get("labels"):
        origin = float(manifest.get("origin", 0.0))
        labels = load_labels(base / manifest["labels"], index, period, origin)
    else:
        origin = manifest.get("origin")
        labels = convert_links_to_affinity(events, period, index, origin)
    return Dataset(
        name=manifest.get("name", manifest_path.parent.name),
        events=events,
        index=index,
        labels=labels,
        candidate_mode=mode,
        num_nodes=int(manifest.get("num_nodes", len(events.nodes))),
        meta=manifest.get("meta", {}),
    )
