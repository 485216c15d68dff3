import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from navis.ctdg import is_normalized
from navis.synth import (
    SynthConfig, affinity_tensor, ar2_autocorrelation, ar2_is_stable, ar2_series, ar2_variance,
    damped_cosine, gen_events, gen_global_latent, gen_labels, generate_synthetic, regime_schedule,
)
from navis.train import TrainConfig, evaluate, evaluate_baseline, train


def test_damped_cosine_poles():
    a1, a2 = damped_cosine(0.1, 0.9)
    roots = np.roots([1.0, -a1, -a2])
    np.testing.assert_allclose(np.abs(roots), [0.9, 0.9])
    np.testing.assert_allclose(sorted(np.abs(np.angle(roots))), [0.2 * math.pi] * 2)


def test_stability_checks():
    assert ar2_is_stable(0.5, 0.2)
    assert not ar2_is_stable(1.0, 0.1)
    with pytest.raises(ValueError):
        SynthConfig(low_regime=(1.2, 0.0))
    with pytest.raises(ValueError):
        SynthConfig(num_nodes=1)
    with pytest.raises(ValueError):
        SynthConfig(query_mode="some")


def test_zero_innovations_zero_latent():
    out = ar2_series(np.zeros(30, dtype=int), [(0.5, 0.2), (0.1, 0.3)], np.zeros(30))
    assert not out.any()


def test_ar2_autocorrelation_matches_closed_form():
    a1, a2 = damped_cosine(0.1, 0.8)
    rng = np.random.default_rng(0)
    n = 200_000
    x = ar2_series(np.zeros(n, dtype=int), [(a1, a2)], rng.standard_normal(n))[1000:]
    x = x - x.mean()
    emp = [np.dot(x[:-k or None], x[k:]) / np.dot(x, x) for k in range(6)]
    np.testing.assert_allclose(emp, ar2_autocorrelation(a1, a2, 5), atol=0.02)
    assert np.var(x) == pytest.approx(ar2_variance(a1, a2), rel=0.05)


def test_regime_schedules():
    sched = regime_schedule(SynthConfig(horizon=100, dwell=10))
    assert list(sched[:25]) == [0] * 10 + [1] * 10 + [0] * 5
    markov = regime_schedule(SynthConfig(horizon=2000, switch_mode="markov", switch_prob=0.05))
    switches = int(np.count_nonzero(np.diff(markov)))
    assert 60 < switches < 140 and markov[0] == 0


def test_latent_scale_auto():
    cfg = SynthConfig(horizon=20000, switch_mode="fixed", dwell=500)
    g, _ = gen_global_latent(cfg)
    assert np.var(g) == pytest.approx(1.0, rel=0.15)


def test_determinism():
    a, b = generate_synthetic(SynthConfig(seed=4, horizon=50)), generate_synthetic(SynthConfig(seed=4, horizon=50))
    assert a.digest() == b.digest()
    assert generate_synthetic(SynthConfig(seed=5, horizon=50)).digest() != a.digest()


def test_poisson_event_count():
    cfg = SynthConfig(num_nodes=50, rate=1.0, horizon=10.0, seed=1)
    ev = gen_events(cfg)
    assert abs(len(ev) - 500) <= 4 * math.sqrt(500)
    assert np.all((ev.times >= 0) & (ev.times <= cfg.horizon))
    assert np.all(np.diff(ev.times) >= 0)
    assert not np.any(ev.sources == ev.dests)


def test_zero_rate_empty():
    cfg = SynthConfig(rate=0.0, horizon=20, query_mode="all")
    ds = generate_synthetic(cfg)
    assert len(ds.events) == 0 and len(ds.labels) == 20 * cfg.num_nodes


def test_labels_are_distributions_without_self():
    cfg = SynthConfig(num_nodes=7, horizon=40, query_mode="all")
    g, _ = gen_global_latent(cfg)
    aff = affinity_tensor(cfg, g)
    assert aff.shape == (40, 7, 7)
    assert np.all(aff[:, np.arange(7), np.arange(7)] == 0)
    assert is_normalized(aff.reshape(-1, 7))


def test_two_nodes_one_hot():
    ds = generate_synthetic(SynthConfig(num_nodes=2, horizon=30, query_mode="all"))
    y = ds.labels.labels
    np.testing.assert_array_equal(y[ds.labels.node == 0], [[0.0, 1.0]] * 30)
    np.testing.assert_array_equal(y[ds.labels.node == 1], [[1.0, 0.0]] * 30)


def test_constant_when_no_modulation():
    cfg = SynthConfig(beta_range=(0.0, 0.0), noise_scale=0.0, horizon=30, query_mode="all")
    ds = generate_synthetic(cfg)
    for u in range(cfg.num_nodes):
        rows = ds.labels.labels[ds.labels.node == u]
        np.testing.assert_allclose(rows, np.broadcast_to(rows[0], rows.shape), atol=1e-15)


def test_constant_labels_all_methods_perfect():
    ds = generate_synthetic(SynthConfig(num_nodes=8, beta_range=(0.0, 0.0), noise_scale=0.0, horizon=60))
    for method in ("pf", "ema", "sma", "ar1"):
        assert evaluate_baseline(method, ds, "test").ndcg == pytest.approx(1.0)
    cfg = TrainConfig(epochs=2, lr=1e-2)
    res = train(cfg, ds)
    assert evaluate(res.model, ds, "test", cfg).ndcg == pytest.approx(1.0)


def test_active_queries_follow_events():
    cfg = SynthConfig(num_nodes=6, horizon=80, rate=0.2, seed=2)
    ds = generate_synthetic(cfg)
    seq, ev = ds.labels, ds.events
    emitted = {(int(t // cfg.dt), int(u)) for t, u in zip(ev.times, ev.sources)}
    assert {(int(b), int(n)) for b, n in zip(seq.bucket, seq.node)} == emitted
    assert np.all(seq.cursor == np.searchsorted(ev.times, seq.time, side="left"))
    with pytest.raises(ValueError):
        gen_labels(cfg, gen_global_latent(cfg)[0])


def test_all_query_mode():
    cfg = SynthConfig(num_nodes=4, horizon=10, query_mode="all")
    seq = generate_synthetic(cfg).labels
    assert len(seq) == 40 and np.all(np.diff(seq.time) >= 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 10), st.floats(0.05, 2.0), st.integers(0, 2**31))
def test_generated_datasets_valid(n, rate, seed):
    ds = generate_synthetic(SynthConfig(num_nodes=n, rate=rate, horizon=25, seed=seed))
    assert is_normalized(ds.labels.labels)
    assert np.all(np.diff(ds.labels.time) >= 0)
    assert ds.index.d == n
