import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from tra.backbone import BackboneConfig, backbone_forward
from tra.core import (
    ErrorMemory,
    MissingEntityError,
    PredictorHeads,
    RouterConfig,
    TRAModel,
    aggregate_temporal_errors,
    combine,
    head_backward,
    head_predict,
    init_router,
    memory_write,
    route,
    route_backward,
    tra_forward,
)
from tra.numerics import NumericalError, finite_diff_gradient, make_rng, relative_error, softmax, spawn_rngs


def fixed_router(logits, mode="LR"):
    """Router whose logits ignore every input and equal ``logits``."""
    K = len(logits)
    cfg = RouterConfig(input_mode=mode, summarizer="ema")
    p = init_router(cfg, K, 2, make_rng(0))
    p["Gh"][:] = 0.0
    p["Ge"][:] = 0.0
    p["g"] = np.asarray(logits, dtype=np.float64)
    return cfg, p


def full_memory(n_stocks=2, n_days=20, K=1):
    s, d = np.meshgrid(np.arange(n_stocks), np.arange(n_days), indexing="ij")
    return ErrorMemory(s.ravel(), d.ravel(), K, n_stocks, n_days)


# heads


def test_head_predict_example():
    heads = PredictorHeads(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0.0, 0.5]))
    np.testing.assert_array_equal(head_predict(heads, [1.0, 0.0]), [1.0, 0.5])


def test_zero_heads_give_zero():
    heads = PredictorHeads(np.zeros((3, 4)), np.zeros(3))
    np.testing.assert_array_equal(head_predict(heads, np.ones(4)), np.zeros(3))


def test_head_shape_mismatch():
    heads = PredictorHeads.init(2, 3, make_rng(0))
    with pytest.raises(ValueError):
        head_predict(heads, np.ones(4))
    with pytest.raises(ValueError):
        PredictorHeads.init(0, 3, make_rng(0))


def test_head_gradients_match_finite_differences():
    rng = make_rng(3)
    heads = PredictorHeads.init(3, 4, rng)
    heads.biases = rng.normal(size=3)
    h = rng.normal(size=(6, 4))
    y = rng.normal(size=(6, 1))

    def loss(W, b, hh):
        return float(np.sum((hh @ W.T + b - y) ** 2))

    grad_y = 2 * (head_predict(heads, h) - y)
    dW, db, dh = head_backward(heads, h, grad_y)
    W, b = heads.weights, heads.biases
    assert relative_error(dW, finite_diff_gradient(lambda v: loss(v, b, h), W)).max() < 1e-4
    assert relative_error(db, finite_diff_gradient(lambda v: loss(W, v, h), b)).max() < 1e-4
    assert relative_error(dh, finite_diff_gradient(lambda v: loss(W, b, v), h)).max() < 1e-4


# memory


def test_aggregate_example():
    mem = full_memory()
    t = 10
    for d, v in zip([t - 3, t - 2, t - 1], [0.2, 0.1, 0.3]):
        mem.write(0, d, [v])
    np.testing.assert_array_equal(aggregate_temporal_errors(mem, 0, t, 3, 1), [[0.2], [0.1], [0.3]])


def test_aggregate_pads_before_history():
    mem = full_memory()
    mem.values[:] = 5.0
    np.testing.assert_array_equal(mem.aggregate(0, 0, 3, 1), np.zeros((3, 1)))


def test_aggregate_partial_padding():
    s = np.array([0, 0])
    d = np.array([8, 9])
    mem = ErrorMemory(s, d, 1, 1, 20)
    mem.write(0, 9, [0.3])
    np.testing.assert_array_equal(mem.aggregate(0, 10, 3, 1), [[0.0], [0.0], [0.3]])


def test_aggregate_shape_and_gap_validation():
    mem = full_memory(K=3)
    assert mem.aggregate(np.array([0, 1]), np.array([12, 15]), 10, 2).shape == (2, 9, 3)
    with pytest.raises(ValueError):
        mem.aggregate(0, 5, 2, 3)
    with pytest.raises(ValueError):
        mem.aggregate(0, 5, 2, 0)


def test_unknown_stock_is_missing_entity():
    mem = full_memory()
    with pytest.raises(MissingEntityError):
        mem.aggregate(7, 5, 3, 1)
    with pytest.raises(MissingEntityError):
        mem.write(7, 5, [0.1])


def test_duplicate_index_rejected():
    with pytest.raises(ValueError):
        ErrorMemory([0, 0], [1, 1], 1, 1, 3)


def test_read_your_write():
    mem = full_memory(K=2)
    memory_write(mem, 1, 7, [0.4, 0.6])
    np.testing.assert_array_equal(mem.aggregate(1, 7 + 2, 5, 2)[-1], [0.4, 0.6])


def test_last_write_wins():
    mem = full_memory()
    mem.write(0, 3, [1.0])
    mem.write(0, 3, [2.0])
    assert mem.values[mem.rows(0, 3)][0] == 2.0


def test_write_length_mismatch():
    mem = full_memory(K=2)
    with pytest.raises(ValueError):
        mem.write(0, 3, [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        mem.write(0, 3, [np.nan, 1.0])


def test_batch_write_leaves_other_rows_untouched():
    mem = full_memory(n_stocks=5, n_days=30, K=3)
    mem.values[:] = make_rng(0).random(mem.values.shape)
    before = mem.values.copy()
    rows = np.array([3, 17, 40, 99])
    mem.write(mem.stock_idx[rows], mem.day_idx[rows], np.ones((4, 3)))
    others = np.setdiff1d(np.arange(len(before)), rows)
    assert mem.values[others].tobytes() == before[others].tobytes()
    np.testing.assert_array_equal(mem.values[rows], 1.0)


def test_read_log_tracks_lookahead():
    mem = full_memory()
    mem.enable_read_log()
    mem.aggregate(np.array([0, 1]), np.array([10, 11]), 6, 2)
    assert mem.max_lookahead(2) == 0
    assert mem.max_lookahead(3) == 1


# router


def test_route_symmetric_logits_tie_break():
    cfg, p = fixed_router([0.0, 0.0])
    res = route(cfg, p, np.zeros(2), np.zeros((cfg.window_rows, 2)))
    np.testing.assert_allclose(res.q[0], [0.5, 0.5], atol=1e-15)
    assert res.chosen[0] == 0


def test_route_softmax_example():
    cfg, p = fixed_router([math.log(2), 0.0])
    res = route(cfg, p, np.zeros(2), np.zeros((cfg.window_rows, 2)))
    np.testing.assert_allclose(res.q[0], [2 / 3, 1 / 3], atol=1e-15)


def test_train_mode_needs_rng():
    cfg, p = fixed_router([0.0, 0.0])
    with pytest.raises(ValueError):
        route(cfg, p, np.zeros(2), np.zeros((cfg.window_rows, 2)), mode="train")
    with pytest.raises(ValueError):
        route(cfg, p, np.zeros(2), np.zeros((cfg.window_rows, 3)))


def test_gumbel_max_frequencies_match_softmax():
    a = np.array([0.5, -0.3, 1.0])
    cfg, p = fixed_router(a)
    cfg.tau = 0.1
    n = 100_000
    res = route(cfg, p, np.zeros((n, 2)), np.zeros((n, cfg.window_rows, 3)), rng=make_rng(42), mode="train")
    freq = np.bincount(np.argmax(res.q, axis=1), minlength=3) / n
    assert np.abs(freq - softmax(a)).max() < 0.02


def test_nonfinite_logits_raise_with_payload():
    cfg, p = fixed_router([0.0, 0.0])
    p["g"] = np.array([0.0, np.inf])
    with pytest.raises(NumericalError) as info:
        route(cfg, p, np.zeros(2), np.zeros((cfg.window_rows, 2)))
    assert info.value.payload["first_bad_index"] == [0, 1]


def test_random_mode_ignores_inputs():
    cfg = RouterConfig(input_mode="Random")
    p = init_router(cfg, 3, 4, make_rng(0))
    r1 = route(cfg, p, np.zeros((5, 4)), np.zeros((5, cfg.window_rows, 3)), noise_rng=make_rng(9))
    r2 = route(cfg, p, np.ones((5, 4)), np.ones((5, cfg.window_rows, 3)), noise_rng=make_rng(9))
    np.testing.assert_array_equal(r1.logits, r2.logits)
    with pytest.raises(ValueError):
        route(cfg, p, np.zeros((5, 4)), np.zeros((5, cfg.window_rows, 3)))


def test_centered_errors_ignore_common_level():
    cfg = RouterConfig(input_mode="TPE", error_norm="center")
    p = init_router(cfg, 3, 4, make_rng(0))
    e = make_rng(1).random((4, cfg.window_rows, 3))
    a1 = route(cfg, p, np.zeros((4, 4)), e).logits
    a2 = route(cfg, p, np.zeros((4, 4)), e + 0.7).logits
    np.testing.assert_allclose(a1, a2, atol=1e-12)


def test_router_config_validation():
    for bad in (dict(tau=0.0), dict(input_mode="X"), dict(summarizer="gru"), dict(gap=0), dict(error_norm="zscore")):
        with pytest.raises(ValueError):
            RouterConfig(**bad).validate()


@pytest.mark.parametrize("mode", ["LR", "TPE", "LR+TPE"])
@pytest.mark.parametrize("summ", ["rnn", "ema"])
def test_router_gradients_match_finite_differences(mode, summ):
    rng = make_rng(5)
    K, D, n = 3, 4, 6
    cfg = RouterConfig(input_mode=mode, summarizer=summ, lookback=5, gap=2, tau=0.7, error_norm="center")
    p = init_router(cfg, K, D, rng)
    p["g"] = rng.normal(size=K)
    h = rng.normal(size=(n, D))
    e = rng.random((n, cfg.window_rows, K)) * 0.2
    gum = rng.gumbel(size=(n, K))
    w = rng.normal(size=(n, K))

    def f_of(name):
        def f(v):
            q = dict(p)
            q[name] = v
            return float(np.sum(w * route(cfg, q, h, e, mode="train", gumbel=gum).q))

        return f

    res = route(cfg, p, h, e, mode="train", gumbel=gum)
    grads, dh = route_backward(cfg, p, res, w)
    for name in p:
        fd = finite_diff_gradient(f_of(name), p[name])
        assert relative_error(grads[name], fd).max() < 1e-4, name
    fd_h = finite_diff_gradient(lambda v: float(np.sum(w * route(cfg, p, v, e, mode="train", gumbel=gum).q)), h)
    assert relative_error(dh, fd_h).max() < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.floats(-100, 100), st.floats(0.1, 5.0))
@example([-1.587292781936123e-126, 0.0], 1.0, 1.0)
def test_shift_invariance_and_normalisation(logits, c, tau):
    cfg, p = fixed_router(logits)
    cfg.tau = tau
    e = np.zeros((cfg.window_rows, len(logits)))
    r1 = route(cfg, p, np.zeros(2), e)
    p2 = dict(p)
    p2["g"] = p["g"] + c
    r2 = route(cfg, p2, np.zeros(2), e)
    assert abs(r1.q.sum() - 1) < 1e-9
    np.testing.assert_allclose(r1.q, r2.q, atol=1e-9)
    # each argmax is taken on the logits that route saw; a shift can round near-ties into exact ties
    assert r1.chosen[0] == np.argmax(p["g"])
    assert r2.chosen[0] == np.argmax(p2["g"])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10_000))
def test_soft_combination_is_convex(K, seed):
    rng = make_rng(seed)
    y = rng.normal(size=(4, K))
    q = rng.dirichlet(np.ones(K), size=4)
    p_hat = combine(y, q, np.argmax(q, axis=1), hard=False)
    assert np.all(p_hat >= y.min(axis=1) - 1e-12)
    assert np.all(p_hat <= y.max(axis=1) + 1e-12)
    np.testing.assert_allclose(p_hat, np.sum(q * y, axis=1), atol=1e-12)


def test_hard_combination_example():
    out = combine(np.array([[0.3, 0.9]]), np.array([[1.0, 0.0]]), np.array([0]), hard=True)
    assert out[0] == 0.3


# full forward


def small_model(K, mode="LR+TPE"):
    bc = BackboneConfig(window_len=3, feature_dim=2, latent_dim=4)
    rc = RouterConfig(input_mode=mode, lookback=4, gap=2)
    return TRAModel.init(bc, rc, K, spawn_rngs(1, ["backbone", "heads", "router"]))


def test_single_head_degenerates_to_backbone_plus_head():
    model = small_model(1)
    rng = make_rng(0)
    x = rng.random((5, 3, 2))
    mem = full_memory(n_stocks=5, n_days=10, K=1)
    mem.values[:] = rng.random(mem.values.shape)
    stock, day = np.arange(5), np.full(5, 7)
    expected = head_predict(model.heads, backbone_forward(model.backbone_cfg, model.backbone, x))[:, 0]
    for mode in ("infer", "train"):
        out = tra_forward(model, x, stock, day, mem, rng=make_rng(2), mode=mode)
        np.testing.assert_array_equal(out.q, np.ones((5, 1)))
        np.testing.assert_array_equal(out.p_hat, expected)
    res = route(model.router_cfg, model.router, backbone_forward(model.backbone_cfg, model.backbone, x),
                mem.aggregate(stock, day, 4, 2), rng=make_rng(3), mode="train")
    grads, dh = route_backward(model.router_cfg, model.router, res, make_rng(4).normal(size=(5, 1)))
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(dh == 0)


def test_forward_matches_step_by_step():
    model = small_model(3)
    rng = make_rng(8)
    x = rng.random((6, 3, 2))
    mem = full_memory(n_stocks=6, n_days=12, K=3)
    mem.values[:] = rng.random(mem.values.shape)
    stock, day = np.arange(6), np.array([3, 5, 7, 9, 11, 0])
    out = tra_forward(model, x, stock, day, mem, mode="infer")
    h = backbone_forward(model.backbone_cfg, model.backbone, x)
    y = head_predict(model.heads, h)
    res = route(model.router_cfg, model.router, h, aggregate_temporal_errors(mem, stock, day, 4, 2))
    np.testing.assert_array_equal(out.y_hat_all, y)
    np.testing.assert_array_equal(out.q, res.q)
    np.testing.assert_array_equal(out.p_hat, y[np.arange(6), res.chosen])
    assert np.all(np.abs(out.q.sum(axis=1) - 1) < 1e-9)
