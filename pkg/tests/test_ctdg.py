import json
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from navis.ctdg import (
    CandidateIndex, EmptyCandidateError, EstimateAccumulator, EventOrderError, EventParseError,
    EventStream, InteractionEvent, SplitError, accumulate_estimate, build_candidate_index,
    chronological_split, convert_links_to_affinity, dataset_from_events, finalize_estimate,
    is_normalized, load_dataset, load_events, save_dataset, save_events, split_counts,
)


def write_csv(tmp_path, text, name="events.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def stream(rows):
    return EventStream.from_events(InteractionEvent(*r) for r in rows)


# --- load_events -----------------------------------------------------------


def test_load_three_rows(tmp_path):
    p = write_csv(tmp_path, "source,dest,time,weight\n1,2,0.0,1.0\n2,3,1.5,2.0\n1,3,1.5,0.5\n")
    ev = load_events(p)
    assert len(ev) == 3
    assert list(ev) == [InteractionEvent(1, 2, 0.0, 1.0), InteractionEvent(2, 3, 1.5, 2.0),
                        InteractionEvent(1, 3, 1.5, 0.5)]
    assert ev.nodes == [1, 2, 3]


def test_time_regression_names_row(tmp_path):
    p = write_csv(tmp_path, "source,dest,time,weight\n1,2,5.0,1\n1,3,4.0,1\n")
    with pytest.raises(EventOrderError) as err:
        load_events(p)
    assert err.value.row == 2
    assert "row 2" in str(err.value)


def test_header_only_is_empty(tmp_path):
    ev = load_events(write_csv(tmp_path, "source,dest,time,weight\n"))
    assert len(ev) == 0 and ev.nodes == []


@pytest.mark.parametrize("body,line", [
    ("1,2,0.0\n", 2),
    ("1,2,0,1\nx,2,1,1\n", 3),
    ("1,2,0,1\n1,2,nan,1\n", 3),
    ("1,2,0,1\n-1,2,1,1\n", 3),
])
def test_malformed_rows_report_line(tmp_path, body, line):
    p = write_csv(tmp_path, "source,dest,time,weight\n" + body)
    with pytest.raises(EventParseError) as err:
        load_events(p)
    assert err.value.line == line


def test_bad_header(tmp_path):
    with pytest.raises(EventParseError):
        load_events(write_csv(tmp_path, "a,b,c,d\n1,2,3,4\n"))


def test_save_load_roundtrip(tmp_path):
    ev = stream([(0, 1, 0.1, 1.0), (1, 0, 0.30000000000000004, -2.5), (4, 1, 7.0, 1e-9)])
    save_events(ev, tmp_path / "e.csv")
    back = load_events(tmp_path / "e.csv")
    assert back.digest() == ev.digest()


# --- candidate index -------------------------------------------------------


def test_destinations_only_first_appearance():
    ev = stream([(1, 7, 0, 1), (2, 3, 1, 1), (1, 7, 2, 1)])
    idx = build_candidate_index(ev, "destinations-only")
    assert idx.d == 2
    assert idx.position(7) == 0 and idx.position(3) == 1


def test_all_nodes_mode_counts_every_node():
    rng = np.random.default_rng(0)
    src = rng.integers(0, 255, 3000)
    dst = rng.integers(0, 255, 3000)
    ev = EventStream(src, dst, np.arange(3000.0), np.ones(3000))
    assert build_candidate_index(ev, "all-nodes").d == len(set(src) | set(dst))


def test_bipartite_stream_keeps_only_targets():
    # many users, few tokens: the candidate set is the token side
    rng = np.random.default_rng(1)
    users = rng.integers(1000, 7000, 5000)
    tokens = rng.integers(0, 50, 5000)
    ev = EventStream(users, tokens, np.arange(5000.0), np.ones(5000))
    idx = build_candidate_index(ev, "destinations-only")
    assert idx.d == len(set(tokens))
    assert len(ev.nodes) > 10 * idx.d


def test_destinations_only_empty_raises():
    with pytest.raises(EmptyCandidateError):
        build_candidate_index(stream([]), "destinations-only")


def test_lookup_missing_is_negative():
    idx = CandidateIndex([5, 9])
    assert list(idx.lookup([9, 4, 5])) == [1, -1, 0]
    assert 9 in idx and 4 not in idx


# --- conversion ------------------------------------------------------------


def test_symmetric_bucket():
    ev = stream([(0, 1, 0.0, 2.0), (0, 2, 0.5, 2.0)])
    idx = CandidateIndex([1, 2])
    seq = convert_links_to_affinity(ev, 1.0, idx)
    np.testing.assert_allclose(seq.labels, [[0.5, 0.5]])


def test_weighted_bucket():
    ev = stream([(0, 1, 0.0, 3.0), (0, 2, 0.5, 1.0)])
    seq = convert_links_to_affinity(ev, 1.0, CandidateIndex([1, 2]))
    np.testing.assert_allclose(seq.labels, [[0.75, 0.25]])
    assert seq.time[0] == 0.0 and seq.cursor[0] == 0


def test_buckets_anchor_at_first_event():
    ev = stream([(0, 1, 10.0, 1.0), (0, 2, 10.9, 1.0), (0, 2, 11.0, 1.0)])
    seq = convert_links_to_affinity(ev, 1.0, CandidateIndex([1, 2]))
    assert list(seq.time) == [10.0, 11.0]
    assert list(seq.cursor) == [0, 2]
    np.testing.assert_allclose(seq.labels, [[0.5, 0.5], [0.0, 1.0]])


def test_negative_weights_clipped_and_zero_rows_dropped():
    ev = stream([(0, 1, 0.0, 2.0), (0, 2, 0.1, -1.0), (1, 2, 0.2, -1.0)])
    seq = convert_links_to_affinity(ev, 1.0, CandidateIndex([1, 2]))
    assert list(seq.node) == [0]
    np.testing.assert_allclose(seq.labels, [[1.0, 0.0]])


def test_outside_candidates_counted():
    ev = stream([(0, 1, 0.0, 1.0), (0, 9, 0.1, 1.0)])
    seq = convert_links_to_affinity(ev, 1.0, CandidateIndex([1]))
    assert seq.skipped_events == 1


def brute_force_sums(ev, period, idx):
    t0 = ev.times[0]
    sums = defaultdict(lambda: np.zeros(idx.d))
    for e in ev:
        if e.dest in idx:
            b = int(np.floor((e.time - t0) / period))
            sums[(b, e.source)][idx.position(e.dest)] += e.weight
    return sums


def test_conversion_conservation_bruteforce():
    rng = np.random.default_rng(3)
    n = 1000
    ev = EventStream(rng.integers(0, 12, n), rng.integers(0, 12, n),
                     np.sort(rng.uniform(0, 50, n)), rng.uniform(-0.5, 3, n))
    idx = build_candidate_index(ev, "destinations-only")
    seq = convert_links_to_affinity(ev, 2.5, idx)
    sums = brute_force_sums(ev, 2.5, idx)
    expected = {}
    for key, raw in sums.items():
        c = np.clip(raw, 0, None)
        if c.sum() > 0:
            expected[key] = c / c.sum()
    got = {(int(b), int(u)): y for b, u, y in zip(seq.bucket, seq.node, seq.labels)}
    assert got.keys() == expected.keys()
    for key in expected:
        np.testing.assert_allclose(got[key], expected[key], rtol=0, atol=1e-12)
    assert is_normalized(seq.labels)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.floats(0, 10),
                          st.floats(-2, 5, allow_nan=False)), min_size=1, max_size=60),
       st.floats(0.1, 4.0))
def test_labels_normalized_or_absent(rows, period):
    rows = sorted(rows, key=lambda r: r[2])
    ev = stream(rows)
    seq = convert_links_to_affinity(ev, period, build_candidate_index(ev))
    sums = seq.labels.sum(axis=1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-9)
    assert np.all(seq.labels >= 0)
    assert np.all(np.diff(seq.time) >= 0)


# --- estimator -------------------------------------------------------------


def test_accumulate_examples():
    idx = CandidateIndex(range(5))
    acc = accumulate_estimate(EstimateAccumulator.zeros(5), InteractionEvent(0, 2, 0, 1.0), idx)
    assert list(acc.raw) == [0, 0, 1, 0, 0]
    acc = EstimateAccumulator.zeros(5)
    for _ in range(2):
        acc = accumulate_estimate(acc, InteractionEvent(0, 3, 0, 0.5), idx)
    assert acc.raw[3] == 1.0
    acc = accumulate_estimate(EstimateAccumulator.zeros(5), InteractionEvent(0, 1, 0, -1.0), idx)
    assert acc.raw[1] == -1.0


def test_accumulate_outside_candidates_skipped():
    acc = accumulate_estimate(EstimateAccumulator.zeros(2), InteractionEvent(0, 7, 0, 1.0), CandidateIndex([0, 1]))
    assert acc.skipped == 1 and not acc.raw.any()


@pytest.mark.parametrize("raw,expected", [
    ([3.0, 1.0], [0.75, 0.25]),
    ([0.0, 0.0], [0.0, 0.0]),
    ([2.0, -2.0], [0.0, 0.0]),
])
def test_finalize(raw, expected):
    acc = EstimateAccumulator(np.array(raw))
    np.testing.assert_allclose(finalize_estimate(acc), expected)
    assert not acc.raw.any()


def test_finalize_twice_gives_zero():
    acc = EstimateAccumulator(np.array([1.0, 2.0]))
    finalize_estimate(acc)
    assert not finalize_estimate(acc).any()


# --- split -----------------------------------------------------------------


@pytest.mark.parametrize("n,expected", [(10, (7, 1, 2)), (100, (70, 15, 15)), (3, (1, 1, 1))])
def test_split_counts(n, expected):
    assert split_counts(n) == expected


def test_split_too_few_periods():
    with pytest.raises(SplitError):
        split_counts(2)


def test_split_bad_fractions():
    with pytest.raises(SplitError):
        split_counts(10, (0.5, 0.2, 0.2))


def test_chronological_split_no_leakage():
    rng = np.random.default_rng(0)
    n = 600
    ev = EventStream(rng.integers(0, 8, n), rng.integers(0, 8, n), np.sort(rng.uniform(0, 40, n)), np.ones(n))
    seq = convert_links_to_affinity(ev, 1.0, build_candidate_index(ev))
    tr, va, te = chronological_split(seq)
    assert tr.time.max() < va.time.min() <= va.time.max() < te.time.min()
    assert len(tr) + len(va) + len(te) == len(seq)
    assert len(set(tr.bucket)) == int(np.floor(0.7 * len(seq.periods())))


# --- datasets on disk ------------------------------------------------------


def test_dataset_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    n = 300
    ev = EventStream(rng.integers(0, 6, n), rng.integers(0, 6, n), np.sort(rng.uniform(0, 30, n)),
                     rng.uniform(0.1, 2, n))
    ds = dataset_from_events(ev, 2.0, "destinations-only", name="toy")
    manifest = save_dataset(ds, tmp_path / "ds")
    back = load_dataset(manifest)
    assert back.digest() == ds.digest()
    meta = json.loads(manifest.read_text())
    for key in ("format_version", "num_nodes", "candidate_mode", "period", "events", "labels"):
        assert key in meta


def test_manifest_without_labels_converts(tmp_path):
    ev = stream([(0, 1, 0.0, 3.0), (0, 2, 0.5, 1.0), (1, 0, 1.2, 1.0)])
    save_events(ev, tmp_path / "events.csv")
    (tmp_path / "manifest.json").write_text(json.dumps(
        {"format_version": 1, "num_nodes": 3, "candidate_mode": "all-nodes", "period": 1.0,
         "events": "events.csv"}))
    ds = load_dataset(tmp_path / "manifest.json")
    assert len(ds.labels) == 2
    np.testing.assert_allclose(ds.labels.labels[0], [0.0, 0.75, 0.25])
