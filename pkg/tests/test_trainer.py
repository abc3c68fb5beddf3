import math

import numpy as np
import pytest

from tra.backbone import BackboneConfig, backbone_forward, init_backbone
from tra.core import PredictorHeads, RouterConfig, TRAModel, combine, route
from tra.dataprep import SyntheticSpec, generate_synthetic, make_windows, split_by_fraction, temporal_split
from tra.numerics import finite_diff_gradient, make_rng, relative_error, spawn_rngs
from tra.ot import SinkhornConfig, build_loss_matrix, sinkhorn_plan
from tra.trainer import (
    RNG_STREAMS,
    Optimizer,
    PlainModel,
    TrainConfig,
    average_predictions,
    build_memory,
    lambda_at,
    load_checkpoint,
    objective,
    plain_step,
    predict_all_heads,
    refresh_memory,
    run_training,
    sequential_inference,
    train_period_ensemble,
    train_plain,
    train_step,
)

W = 3


@pytest.fixture(scope="module")
def sets():
    panel, _ = generate_synthetic(SyntheticSpec(n_stocks=20, n_days=150, n_features=4, regime_period=25))
    ws = make_windows(panel, W)
    return temporal_split(ws, split_by_fraction(panel.dates, (0.6, 0.2, 0.2), 6))


def bcfg(kind="linear-flatten"):
    hidden = [5] if kind == "mlp-flatten" else []
    return BackboneConfig(kind=kind, window_len=W, feature_dim=4, hidden_dims=hidden, latent_dim=4)


def make_model(K=3, mode="LR+TPE", kind="linear-flatten", summ="rnn", seed=0):
    rc = RouterConfig(input_mode=mode, summarizer=summ, lookback=5, gap=2, tau=0.8)
    return TRAModel.init(bcfg(kind), rc, K, spawn_rngs(seed, RNG_STREAMS))


def small_train(**kw):
    base = dict(K=3, lam=2.0, epochs=3, batch_size=128, learning_rate=5e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# config and schedule


def test_train_config_validation():
    with pytest.raises(ValueError, match="rho"):
        TrainConfig(rho=1.5).validate()
    with pytest.raises(ValueError):
        TrainConfig(rho=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(K=4, batch_size=3).validate()
    TrainConfig(K=4, batch_size=3, lam=0.0).validate()


def test_lambda_decay_exact():
    assert lambda_at(2.0, 0.5, 3) == 0.25
    assert lambda_at(2.0, 1.0, 1000) == 2.0
    assert lambda_at(1.0, 0.999, 0) == 1.0


def test_report_lambda_matches_batch_count(sets):
    cfg = small_train(epochs=2)
    _, rep = run_training(cfg, bcfg(), RouterConfig(lookback=5, gap=2), sets)
    n_batches = math.ceil(len(sets["train"]) / cfg.batch_size)
    for e in rep.epochs:
        assert e.lam == cfg.lam * cfg.rho ** (n_batches * e.epoch)
        assert abs(sum(e.shares) - 1) < 1e-9


def test_empty_split_rejected(sets):
    empty = sets["valid"].subset(np.zeros(len(sets["valid"]), dtype=bool))
    with pytest.raises(ValueError, match="empty valid"):
        run_training(small_train(), bcfg(), RouterConfig(), {"train": sets["train"], "valid": empty})


# objective


def fixed_logit_model(logits):
    model = make_model(K=len(logits))
    model.router["Gh"][:] = 0
    model.router["Ge"][:] = 0
    model.router["g"] = np.asarray(logits, dtype=float)
    model.router_cfg.tau = 1.0
    return model


def test_lambda_zero_total_is_base(sets):
    model = make_model()
    d = sets["train"]
    b = np.arange(16)
    errw = np.zeros((16, model.router_cfg.window_rows, 3))
    out = objective(model, d.windows(b), d.labels[b], errw, np.zeros((16, 3)), np.full((16, 3), 1 / 3), 0.0)
    assert out.total == out.base


def test_regulariser_terms():
    a = math.log(math.exp(-1) / (1 - math.exp(-1)))
    for logits, expected in (([a, 0.0], 1.0), ([60.0, 0.0], 0.0)):
        model = fixed_logit_model(logits)
        X = np.zeros((1, W, 4))
        errw = np.zeros((1, model.router_cfg.window_rows, 2))
        out = objective(model, X, [0.0], errw, np.zeros((1, 2)), np.array([[1.0, 0.0]]), 1.0)
        assert out.reg == pytest.approx(expected, abs=1e-11)


@pytest.mark.parametrize("kind", ["linear-flatten", "mlp-flatten", "recurrent-mean"])
@pytest.mark.parametrize("mode,summ", [("LR+TPE", "rnn"), ("TPE", "ema"), ("Random", "rnn")])
def test_objective_gradient_matches_finite_differences(sets, kind, mode, summ):
    model = make_model(kind=kind, mode=mode, summ=summ, seed=7)
    rng = make_rng(3)
    d = sets["train"]
    b = rng.choice(len(d), 12, replace=False)
    X, y = d.windows(b), d.labels[b]
    errw = rng.random((12, model.router_cfg.window_rows, 3)) * 0.3
    gum = rng.gumbel(size=(12, 3))
    P = rng.dirichlet(np.ones(3), size=12)
    noise = None
    if mode == "Random":
        noise = (rng.standard_normal((12, 4)), rng.standard_normal((12, model.router_cfg.embed_dim(3))))
    lam = 1.7
    out = objective(model, X, y, errw, gum, P, lam, noise)
    params = model.params()
    for name, value in params.items():
        def f(v, name=name):
            m = model.copy()
            m.set_params({name: v})
            return objective(m, X, y, errw, gum, P, lam, noise).total

        fd = finite_diff_gradient(f, value)
        assert relative_error(out.grads[name], fd).max() < 1e-4, name


# memory


def test_refresh_matches_recomputation_and_is_idempotent(sets):
    model = make_model()
    d = sets["train"]
    mem = build_memory(3, d)
    refresh_memory(model, d, mem)
    first = mem.values.copy()
    refresh_memory(model, d, mem)
    assert mem.values.tobytes() == first.tobytes()
    for i in make_rng(0).choice(len(d), 20, replace=False):
        y_all = predict_all_heads(model, d, np.array([i]))[0]
        np.testing.assert_allclose(mem.values[mem.rows(d.stock_idx[i], d.day_idx[i])], (y_all - d.labels[i]) ** 2, rtol=1e-12)


def test_refresh_zero_error_head(sets):
    model = make_model(K=2)
    d = sets["train"].subset(np.arange(5))
    model.heads.weights[0] = 0
    model.heads.biases[0] = d.labels[0]
    mem = refresh_memory(model, d, build_memory(2, d))
    assert mem.values[mem.rows(d.stock_idx[0], d.day_idx[0])][0] == 0.0


def test_memory_after_step_holds_batch_losses_only(sets):
    model = make_model()
    d = sets["train"]
    mem = build_memory(3, d)
    refresh_memory(model, d, mem)
    before = mem.values.copy()
    pre = model.copy()
    batch = np.sort(make_rng(1).choice(len(d), 64, replace=False))
    rngs = spawn_rngs(0, RNG_STREAMS)
    train_step(model, Optimizer("adaptive-moments", 1e-2), d, batch, mem, 2.0, rngs, SinkhornConfig())
    rows = mem.rows(d.stock_idx[batch], d.day_idx[batch])
    expected = build_loss_matrix(predict_all_heads(pre, d, batch), d.labels[batch])
    np.testing.assert_allclose(mem.values[rows], expected, rtol=1e-12)
    other = np.setdiff1d(np.arange(len(before)), rows)
    assert mem.values[other].tobytes() == before[other].tobytes()


def test_descent_sanity_single_head(sets):
    d = sets["train"]
    decreased = 0
    for seed in range(10):
        model = make_model(K=1, seed=seed)
        rngs = spawn_rngs(seed, RNG_STREAMS)
        batch = np.sort(make_rng(seed).choice(len(d), 128, replace=False))
        mem = build_memory(1, d)
        before = train_step(model, Optimizer("adaptive-moments", 1e-3), d, batch, mem, 0.0, rngs, SinkhornConfig()).base
        y_all = predict_all_heads(model, d, batch)[:, 0]
        after = float(np.mean((y_all - d.labels[batch]) ** 2))
        decreased += after < before
    assert decreased >= 8


def test_step_uses_sinkhorn_plan_for_router_target(sets):
    model = make_model()
    d = sets["train"]
    mem = build_memory(3, d)
    batch = np.arange(30)
    rngs = spawn_rngs(0, RNG_STREAMS)
    st = train_step(model, Optimizer("plain-gradient", 1e-12), d, batch, mem, 2.0, rngs, SinkhornConfig())
    plan = sinkhorn_plan(st.losses, [1 / 3] * 3)
    assert st.sinkhorn_iters == plan.iterations
    assert st.chosen_counts.sum() == 30


# sequential inference


def test_unsorted_input_rejected(sets):
    model = make_model()
    te = sets["test"]
    rev = te.subset(np.arange(len(te))[::-1])
    with pytest.raises(ValueError, match="sorted"):
        sequential_inference(model, build_memory(3, te), rev)


def test_sequential_reads_never_look_ahead(sets):
    model = make_model()
    mem = build_memory(3, sets["train"], sets["valid"], sets["test"])
    refresh_memory(model, sets["train"], mem)
    mem.enable_read_log()
    res = sequential_inference(model, mem, sets["test"])
    assert mem.max_lookahead(model.router_cfg.gap) <= 0
    assert all(read >= day + sets["test"].horizon for day, read in res.label_reads)


def test_second_day_sees_only_old_errors(sets):
    model = make_model()
    te = sets["test"]
    days = np.unique(te.day_idx)[:2]
    two = te.subset(np.isin(te.day_idx, days))
    mem = build_memory(3, two)
    mem.enable_read_log()
    sequential_inference(model, mem, two)
    q2, r2 = mem.read_log[1]
    assert np.all(r2 <= days[1] - model.router_cfg.gap)


def test_sequential_matches_manual_replay(sets):
    model = make_model(seed=4)
    tr, va, te = sets["train"], sets["valid"], sets["test"]
    mem = build_memory(3, tr, va, te)
    refresh_memory(model, tr, mem)
    refresh_memory(model, va, mem)
    replay_mem = mem.copy()
    res = sequential_inference(model, mem, te)
    rc = model.router_cfg
    y_all = predict_all_heads(model, te)
    expected = np.empty(len(te))
    written = set()
    groups = te.day_groups()
    for j, g in enumerate(groups):
        t = te.day_idx[g[0]]
        h = backbone_forward(model.backbone_cfg, model.backbone, te.windows(g))
        errw = replay_mem.aggregate(te.stock_idx[g], te.day_idx[g], rc.lookback, rc.gap)
        r = route(rc, model.router, h, errw)
        expected[g] = combine(y_all[g], r.q, r.chosen, True)
        # labels of every earlier day with day + horizon <= t are now realised
        for g2 in groups[: j + 1]:
            t2 = te.day_idx[g2[0]]
            if t2 + te.horizon <= t and t2 not in written:
                replay_mem.write(te.stock_idx[g2], te.day_idx[g2], (y_all[g2] - te.labels[g2][:, None]) ** 2)
                written.add(t2)
    np.testing.assert_array_equal(res.p_hat, expected)


# plain model, degeneracy and ensembles


def test_single_head_training_equals_plain_model(sets):
    cfg = small_train(K=1, epochs=2)
    tra_model, rep = run_training(cfg, bcfg(), RouterConfig(lookback=5, gap=2), sets)
    plain, hist = train_plain(cfg, bcfg(), sets)
    for name, v in plain.params().items():
        np.testing.assert_allclose(tra_model.params()[name], v, rtol=0, atol=1e-10)
    mem = build_memory(1, sets["train"], sets["valid"], sets["test"])
    res = sequential_inference(tra_model, mem, sets["test"])
    np.testing.assert_allclose(res.p_hat, plain.predict(sets["test"]), atol=1e-10)
    assert [e.valid_mse for e in rep.epochs] == pytest.approx([h["valid_mse"] for h in hist], abs=1e-10)


def test_average_predictions_example():
    np.testing.assert_allclose(average_predictions([np.full(4, 0.2), np.full(4, 0.4)]), 0.3, atol=1e-15)


def test_single_period_ensemble_is_plain_training(sets):
    cfg = small_train(K=1, epochs=2)
    preds, members = train_period_ensemble(cfg, bcfg(), sets, 1)
    plain, _ = train_plain(cfg, bcfg(), sets)
    assert len(members) == 1
    np.testing.assert_array_equal(preds, plain.predict(sets["test"]))


def test_ensemble_rejects_short_spans(sets):
    with pytest.raises(ValueError, match="fewer than one batch"):
        train_period_ensemble(small_train(K=1, batch_size=2000), bcfg(), sets, 3)


def test_plain_step_decreases_loss(sets):
    rngs = spawn_rngs(0, RNG_STREAMS)
    m = PlainModel(bcfg(), init_backbone(bcfg(), rngs["backbone"]), PredictorHeads.init(1, 4, rngs["heads"]))
    d = sets["train"]
    b = np.arange(256)
    opt = Optimizer("plain-gradient", 0.05)
    losses = [plain_step(m, opt, d.windows(b), d.labels[b]) for _ in range(20)]
    assert losses[-1] < losses[0]


# checkpoints


def test_resume_is_bit_reproducible(sets, tmp_path):
    cfg = small_train(epochs=4)
    rc = RouterConfig(lookback=5, gap=2)
    full_model, full_rep = run_training(cfg, bcfg(), rc, sets)
    ck = tmp_path / "ck.npz"
    run_training(cfg, bcfg(), rc, sets, checkpoint_path=ck, max_epochs=2)
    assert load_checkpoint(ck).meta["resume"]["epoch"] == 2
    resumed_model, resumed_rep = run_training(cfg, bcfg(), rc, sets, checkpoint_path=ck, resume_from=ck)
    for name, v in full_model.params().items():
        assert resumed_model.params()[name].tobytes() == v.tobytes(), name
    assert resumed_rep.to_json() == full_rep.to_json()


def test_checkpoint_round_trip(sets, tmp_path):
    cfg = small_train(epochs=1)
    ck = tmp_path / "c.npz"
    model, _ = run_training(cfg, bcfg(), RouterConfig(lookback=5, gap=2), sets, checkpoint_path=ck)
    loaded = load_checkpoint(ck)
    assert loaded.train_cfg == cfg
    for name, v in model.params().items():
        np.testing.assert_array_equal(loaded.best.params()[name], v)
