import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from navis.model import (
    PARAM_NAMES, GlobalBuffer, NavisModel, NavisParams, NodeStateTable, aggregate_global,
    ema_parameterization, init_params, logit, navis_backward, navis_forward, observe_ground_truth,
    pf_parameterization, predict_affinity, update_global_buffer,
)


def sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def test_init_frozen_values():
    p = init_params(4, seed=0)
    np.testing.assert_allclose(p.w_xh, [0.13696169, -0.23021329, -0.45902648, -0.48347236], atol=1e-8)
    np.testing.assert_allclose(p.b_s, [0.11538511, -0.11632245, 0.49720994, 0.48083534], atol=1e-8)


def test_forward_matches_scalar_formula():
    p = init_params(4, seed=0)
    x = np.array([0.1, 0.2, 0.3, 0.4])
    h_prev = np.array([0.4, 0.3, 0.2, 0.1])
    g = np.full(4, 0.25)
    h, s, _ = navis_forward(p, h_prev, x, g)
    z_h = sig(p.w_xh @ x + p.w_hh @ h_prev + p.b_h)
    h_ref = z_h * h_prev + (1 - z_h) * x
    z_s = sig(p.w_xs @ x + p.w_hs @ h_ref + p.w_gs @ g + p.b_s)
    s_ref = z_s * h_ref + (1 - z_s) * x
    np.testing.assert_allclose(h, h_ref, atol=1e-15)
    np.testing.assert_allclose(s, s_ref, atol=1e-15)
    # frozen after computing with the formula above
    np.testing.assert_allclose(s, [0.15725512, 0.21799901, 0.26784, 0.30520087], atol=1e-8)


def test_init_schemes():
    for scheme in ("fan-in", "sqrt-d"):
        assert np.all(np.abs(init_params(1, scheme, 3).arrays()["w_xs"]) <= 1)
    big = init_params(10_000, "fan-in", 0)
    assert max(np.max(np.abs(v)) for v in big.arrays().values()) <= 0.01
    a, b = init_params(7, seed=5), init_params(7, seed=5)
    for k in PARAM_NAMES:
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
    with pytest.raises(ValueError):
        init_params(0)
    with pytest.raises(ValueError):
        init_params(3, "nope")


def test_saturated_ema_and_pf():
    rng = np.random.default_rng(0)
    d = 5
    for alpha in (0.1, 0.5, 0.8):
        p = ema_parameterization(d, alpha)
        h_prev, x, g = rng.random((3, d))
        _, s, _ = navis_forward(p, h_prev, x, g)
        np.testing.assert_allclose(s, alpha * h_prev + (1 - alpha) * x, atol=1e-12)
    x = rng.random(d)
    _, s, _ = navis_forward(pf_parameterization(d), rng.random(d), x, rng.random(d))
    np.testing.assert_allclose(s, x, atol=1e-12)


def test_logit_inverts_sigmoid():
    for p in (0.01, 0.2, 0.5, 0.99):
        assert abs(sig(logit(p)) - p) < 1e-12


@settings(max_examples=50)
@given(st.integers(1, 10), st.floats(-5, 5), st.integers(0, 2**31))
def test_equal_inputs_fixed_point(d, c, seed):
    p = init_params(d, "sqrt-d", seed)
    v = np.full(d, c)
    h, s, _ = navis_forward(p, v, v, np.random.default_rng(seed).random(d))
    np.testing.assert_allclose(h, v, atol=1e-12)
    np.testing.assert_allclose(s, v, atol=1e-12)


@settings(max_examples=60)
@given(st.integers(1, 10), st.integers(0, 2**31), st.sampled_from([False, True]))
def test_gate_range_and_convexity(d, seed, elementwise):
    rng = np.random.default_rng(seed)
    p = NavisParams(*(rng.normal(size=d) for _ in PARAM_NAMES))
    h_prev, x, g = rng.normal(size=(3, d))
    h, s, c = navis_forward(p, h_prev, x, g, elementwise)
    assert np.all((c.z_h > 0) & (c.z_h < 1)) and np.all((c.z_s > 0) & (c.z_s < 1))
    tol = 1e-12
    assert np.all(h >= np.minimum(h_prev, x) - tol) and np.all(h <= np.maximum(h_prev, x) + tol)
    assert np.all(s >= np.minimum(h, x) - tol) and np.all(s <= np.maximum(h, x) + tol)


def test_forward_errors():
    p = init_params(3)
    with pytest.raises(ValueError):
        navis_forward(p, np.zeros(3), np.zeros(4), np.zeros(3))
    with pytest.raises(ValueError):
        navis_forward(p, np.zeros(3), np.array([np.nan, 0, 0]), np.zeros(3))


def _fd(f, arr, eps=1e-5):
    out = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + eps
        up = f()
        arr[i] = old - eps
        down = f()
        arr[i] = old
        out[i] = (up - down) / (2 * eps)
    return out


def test_backward_zero_upstream():
    p = init_params(4)
    _, _, c = navis_forward(p, *np.random.default_rng(0).random((3, 4)))
    grads, dx, dh = navis_backward(p, c, np.zeros(4))
    assert all(not v.any() for v in grads.values()) and not dx.any() and not dh.any()


@pytest.mark.parametrize("d,elementwise", [(1, False), (8, False), (8, True)])
def test_backward_finite_differences(d, elementwise):
    rng = np.random.default_rng(d)
    p = NavisParams(*(rng.normal(size=d) for _ in PARAM_NAMES))
    arrays = p.arrays()
    h_prev, x, g, w = rng.normal(size=(4, d))

    def loss():
        return float(w @ navis_forward(NavisParams.from_arrays(arrays), h_prev, x, g, elementwise)[1])

    _, _, cache = navis_forward(p, h_prev, x, g, elementwise)
    grads, dx, dh = navis_backward(p, cache, w, elementwise)
    tol = 1e-6 if d == 1 else 1e-4
    for k in PARAM_NAMES:
        num = _fd(loss, arrays[k])
        assert np.max(np.abs(num - grads[k])) <= tol * max(1.0, np.max(np.abs(num)))
    np.testing.assert_allclose(dx, _fd(loss, x), rtol=tol, atol=1e-8)
    np.testing.assert_allclose(dh, _fd(loss, h_prev), rtol=tol, atol=1e-8)


def test_gru_model_gradients():
    rng = np.random.default_rng(4)
    m = NavisModel(5, state_update="gru", seed=2)
    h_prev, x, g, w = rng.normal(size=(4, 5))

    def loss():
        return float(w @ m.forward(h_prev, x, g)[1])

    _, _, cache = m.forward(h_prev, x, g)
    grads, dx, _ = m.backward(cache, w)
    assert set(grads) == set(m.params)
    assert "w_xh" not in m.params
    for k, arr in m.params.items():
        np.testing.assert_allclose(grads[k], _fd(loss, arr), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(dx, _fd(loss, x), rtol=1e-5, atol=1e-8)


def test_model_without_global_ignores_g():
    m = NavisModel(4, use_global=False, seed=1)
    rng = np.random.default_rng(0)
    h, x = rng.random((2, 4))
    a = m.forward(h, x, rng.random(4))[1]
    b = m.forward(h, x, np.zeros(4))[1]
    np.testing.assert_array_equal(a, b)
    assert not m.backward(m.forward(h, x, rng.random(4))[2], np.ones(4))[0]["w_gs"].any()


def test_model_copy_is_independent():
    m = NavisModel(3)
    c = m.copy()
    c.params["b_s"][:] = 9
    assert not np.any(m.params["b_s"] == 9)


# --- global buffer ---------------------------------------------------------


def test_buffer_fifo():
    b = GlobalBuffer(1, capacity=3)
    for v in range(1, 6):
        update_global_buffer(b, [float(v)])
    assert [it[0] for it in b.items] == [3.0, 4.0, 5.0]
    one = GlobalBuffer(1, capacity=1)
    for v in range(4):
        one.push([float(v)])
        assert aggregate_global(one)[0] == v


def test_buffer_aggregation():
    b = GlobalBuffer(2, mode="most-recent")
    assert not aggregate_global(b).any()
    b.extend([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(aggregate_global(b), [3.0, 4.0])
    m = GlobalBuffer(2, mode="mean")
    m.extend([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(aggregate_global(m), [0.5, 0.5])
    with pytest.raises(ValueError):
        GlobalBuffer(2, mode="median")
    with pytest.raises(ValueError):
        b.push([1.0])


# --- node state ------------------------------------------------------------


def test_unseen_node_predicts_zero():
    m = NavisModel(3, seed=0)
    s = predict_affinity(m, NodeStateTable(3), GlobalBuffer(3), 42)
    assert not s.any()


def test_ground_truth_setting_with_pf():
    m = NavisModel(3, params=pf_parameterization(3).arrays())
    table, buf = NodeStateTable(3), GlobalBuffer(3)
    predict_affinity(m, table, buf, 7)
    observe_ground_truth(table, buf, 7, np.array([0.2, 0.5, 0.3]))
    np.testing.assert_allclose(predict_affinity(m, table, buf, 7), [0.2, 0.5, 0.3], atol=1e-12)


def test_full_ctdg_setting_with_pf():
    m = NavisModel(2, params=pf_parameterization(2).arrays())
    table, buf = NodeStateTable(2), GlobalBuffer(2)
    table.accumulate([5, 5], [0, 1], [2.0, 2.0])
    s = predict_affinity(m, table, buf, 5, setting="full-ctdg")
    np.testing.assert_allclose(s, [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(buf.aggregate(), [0.5, 0.5])
    # estimate was reset; only the saturated gate's e^-40 leak of h remains
    np.testing.assert_allclose(predict_affinity(m, table, buf, 5, setting="full-ctdg"), 0.0, atol=1e-12)


def test_table_lazy_rows_and_skips():
    t = NodeStateTable(3)
    rows = t.lookup([9, 4, 9])
    assert list(rows) == [0, 1, 0] and len(t) == 2 and 4 in t
    t.accumulate([4, 4], [-1, 2], [1.0, 1.0])
    assert t.skipped_events == 1
    np.testing.assert_array_equal(t.take_estimates([1])[0], [0, 0, 1])


def test_node_streams_independent_without_global():
    rng = np.random.default_rng(0)
    m = NavisModel(4, use_global=False, seed=3)
    seq_a, seq_b = rng.dirichlet(np.ones(4), 10), rng.dirichlet(np.ones(4), 10)

    def run(pairs):
        table, buf = NodeStateTable(4), GlobalBuffer(4)
        out = {0: [], 1: []}
        for node, y in pairs:
            out[node].append(predict_affinity(m, table, buf, node))
            observe_ground_truth(table, buf, node, y)
        return out

    mixed = run([(n, s[i]) for i in range(10) for n, s in ((0, seq_a), (1, seq_b))])
    alone_a = run([(0, y) for y in seq_a])
    alone_b = run([(1, y) for y in seq_b])
    np.testing.assert_array_equal(mixed[0], alone_a[0])
    np.testing.assert_array_equal(mixed[1], alone_b[1])
