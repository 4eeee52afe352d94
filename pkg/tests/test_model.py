import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcfr import experiments as ex
from rcfr.baselines import ols_fit
from rcfr.data import SourceSample, TargetSample
from rcfr.model import (
    AlphaState, NumericalError, RcfrModel, TrainConfig, adaptive_alpha, compute_weights,
    estimate_cate, fit, full_objective, imbalance, lipschitz_estimate, normalize_weights,
    objective_h_phi, objective_w, predict, representation, weighted_factual_risk,
)
from rcfr.nn import AdamState, adam_step, grad_check

SMALL = dict(rep_layers=(6, 4), head_layers=(4,), weight_layers=(5, 5))


def toy_model(rng, in_dim=3, n_arms=2, randomize_w=True, **cfg):
    cfg = TrainConfig(**{**SMALL, **cfg})
    model = RcfrModel.init(in_dim, n_arms, cfg, rng)
    if randomize_w:
        last = model.weight_net.layers[-1]
        last.weight[:] = rng.standard_normal(last.weight.shape)
    return model, cfg


def snapshot(nets):
    return [p.copy() for net in nets for p in net.params()]


# ---------------------------------------------------------------- config


def test_config_validation_and_round_trip():
    cfg = TrainConfig(alpha=3.0, rep_layers=[8, 4])
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    for bad in (dict(learning_rate=0), dict(patience=0), dict(alpha_mode="magic"), dict(lambda_w=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ---------------------------------------------------------------- representation / predict


def test_representation_rows_are_unit_norm(rng):
    model, _ = toy_model(rng)
    z = representation(model, rng.standard_normal((20, 3)))
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        representation(model, np.ones((2, 4)))


def test_representation_projective_invariance_and_zero_guard(rng):
    model, _ = toy_model(rng, rep_layers=(3,))
    # final layer is ELU; with identity-like weights and zero bias a positive row scales linearly
    layer = model.rep_net.layers[0]
    layer.weight[:] = np.eye(3)
    x = np.array([[0.2, 0.5, 1.0]])
    assert np.allclose(representation(model, x), representation(model, 10 * x))
    z = representation(model, np.zeros((1, 3)))
    assert np.all(z == 0) and np.all(np.isfinite(z))


def test_predict_examples(rng):
    model, _ = toy_model(rng)
    for h in model.heads:
        for p in h.params():
            p[:] = 0
    assert np.all(predict(model, rng.standard_normal((4, 3)), [0, 1, 1, 0]) == 0)
    with pytest.raises(ValueError, match="arm"):
        predict(model, np.ones((1, 3)), [2])


def test_prediction_depends_only_on_normalized_representation(rng):
    model, _ = toy_model(rng, rep_layers=(3,))
    model.rep_net.layers[0].weight[:] = np.eye(3)
    x = np.array([[0.3, 0.1, 0.4]])
    assert predict(model, x, [1]) == pytest.approx(predict(model, 4 * x, [1]))


def test_linear_head_sanity_fit():
    r = np.random.default_rng(0)
    x = r.uniform(-1, 1, (600, 1))
    src = SourceSample(x[:500], np.zeros(500), 2 * x[:500, 0])
    cfg = TrainConfig(rep_layers=(), head_layers=(), normalize_rep=False, weight_layers=(4,), alpha=0.0,
                      learn_weights=False, batch_size=500, max_epochs=2000, learning_rate=1e-2, lambda_h=0.0)
    model, _ = fit(src, None, cfg)
    rmse = np.sqrt(np.mean((model.predict(x[500:], np.zeros(100, dtype=int)) - 2 * x[500:, 0]) ** 2))
    assert rmse < 0.1


def test_estimate_cate_examples(rng):
    model, _ = toy_model(rng)
    model.heads[1] = model.heads[0].copy()
    x = rng.standard_normal((5, 3))
    assert np.allclose(estimate_cate(model, x), 0.0)
    for h, c in zip(model.heads, (1.0, 3.0)):
        for layer in h.layers:
            layer.weight[:] = 0
        h.layers[-1].bias[:] = c
    assert np.allclose(estimate_cate(model, x), 2.0)
    three, _ = toy_model(rng, n_arms=3)
    with pytest.raises(ValueError):
        estimate_cate(three, x)


def test_training_improves_cate_estimate():
    data = ex.gen_synthetic_cate(300, 3, 5, ex.CateSpec(gamma=1.0, effect="linear", b0=2.0))
    cfg = ex.cate_config(max_epochs=60, rep_layers=(16, 8), head_layers=(8,), weight_layers=(8, 8))
    untrained = RcfrModel.init(3, 2, cfg, np.random.default_rng(0))
    trained, _ = fit(data.source(), None, cfg, n_arms=2)

    def err(m):
        return np.sqrt(np.mean((estimate_cate(m, data.x) - data.tau) ** 2))

    assert err(trained) < err(untrained)


# ---------------------------------------------------------------- weights


def test_weights_constant_net_gives_exact_ones(rng):
    model, _ = toy_model(rng, randomize_w=False)
    for p in model.weight_net.params():
        p[:] = 0
    w = compute_weights(model, rng.standard_normal((7, 4)), rng.integers(0, 2, 7))
    assert np.all(w == 1.0)
    with pytest.raises(ValueError):
        compute_weights(model, np.zeros((0, 4)), np.zeros(0, dtype=int))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(3, 30), st.integers(1, 3))
def test_weights_are_valid_for_random_nets(seed, n, arms):
    r = np.random.default_rng(seed)
    model, _ = toy_model(r, n_arms=arms)
    t = np.arange(n) % arms
    w = compute_weights(model, r.standard_normal((n, 4)), t)
    assert np.all(w > 0) and np.all(np.isfinite(w))
    for a in range(arms):
        assert abs(w[t == a].mean() - 1.0) < 1e-9


def test_normalize_weights_is_scale_invariant(rng):
    raw = rng.uniform(0.1, 3, 10)
    t = rng.integers(0, 2, 10)
    assert np.allclose(normalize_weights(2 * raw, t), normalize_weights(raw, t), rtol=0, atol=1e-15)
    assert normalize_weights(raw, per_arm=False).mean() == pytest.approx(1.0, abs=1e-12)


def test_weighted_factual_risk_examples(rng):
    model, _ = toy_model(rng, n_arms=1)
    x = rng.standard_normal((2, 3))
    f = predict(model, x, [0, 0])
    assert weighted_factual_risk(model, x, [0, 0], f, [1, 1]) == 0
    assert weighted_factual_risk(model, x, [0, 0], f - [1, 3], [1, 1]) == pytest.approx(5.0)
    assert weighted_factual_risk(model, x, [0, 0], f - [1, 3], [2, 1e-12]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        weighted_factual_risk(model, x, [0, 0], f, [1, 0])


# ---------------------------------------------------------------- objectives


def test_h_phi_objective_reduces_to_risk(rng):
    model, cfg = toy_model(rng, lambda_h=0.0)
    x, t, y = rng.standard_normal((10, 3)), np.arange(10) % 2, rng.standard_normal(10)
    w = normalize_weights(rng.uniform(0.5, 2, 10), t)
    r = objective_h_phi(model, x, t, y, w, None, cfg, 0.0)
    assert r.value == weighted_factual_risk(model, x, t, y, w)


def test_h_phi_objective_zero_at_perfect_balanced_fit(rng):
    model, cfg = toy_model(rng, n_arms=1, lambda_h=0.0)
    x = rng.standard_normal((6, 3))
    y = predict(model, x, np.zeros(6, dtype=int))
    r = objective_h_phi(model, x, np.zeros(6, dtype=int), y, np.ones(6), x, cfg, 5.0)
    assert abs(r.value) < 1e-12


@pytest.mark.parametrize("with_target", [False, True])
def test_objective_gradients_on_ten_samples(rng, with_target):
    arms = 1 if with_target else 2
    model, cfg = toy_model(rng, n_arms=arms, lambda_h=0.3, lambda_w=0.7)
    x, t, y = rng.standard_normal((10, 3)), np.arange(10) % arms, rng.standard_normal(10)
    xt = rng.standard_normal((7, 3)) + 0.4 if with_target else None
    w = normalize_weights(rng.uniform(0.5, 2, 10), t)
    hp = model.rep_net.params() + [p for h in model.heads for p in h.params()]

    def fh():
        r = objective_h_phi(model, x, t, y, w, xt, cfg, 1.5)
        return r.value, r.rep_grads + [g for hg in r.head_grads for g in hg]

    def fw():
        r = objective_w(model, x, t, xt, cfg, 1.5)
        return r.value, r.weight_grads

    assert grad_check(fh, hp) < 1e-4
    assert grad_check(fw, model.weight_net.params()) < 1e-4


def test_gradient_partitioning(rng):
    model, cfg = toy_model(rng)
    x, t, y = rng.standard_normal((10, 3)), np.arange(10) % 2, rng.standard_normal(10)
    w = compute_weights(model, representation(model, x), t)
    h_nets = [model.rep_net, *model.heads]

    before_w = snapshot([model.weight_net])
    r = objective_h_phi(model, x, t, y, w, None, cfg, 2.0)
    adam_step(AdamState(lr=0.1), h_nets, r.rep_grads + [g for hg in r.head_grads for g in hg])
    assert all(np.array_equal(a, b) for a, b in zip(before_w, snapshot([model.weight_net])))

    before_h = snapshot(h_nets)
    r = objective_w(model, x, t, None, cfg, 2.0)
    adam_step(AdamState(lr=0.1), model.weight_net, r.weight_grads)
    assert all(np.array_equal(a, b) for a, b in zip(before_h, snapshot(h_nets)))


@pytest.mark.parametrize("with_target", [False, True])
def test_split_objectives_sum_to_joint_objective(rng, with_target):
    arms = 1 if with_target else 2
    model, cfg = toy_model(rng, n_arms=arms, lambda_h=0.0, lambda_w=0.37)
    x, t, y = rng.standard_normal((12, 3)), np.arange(12) % arms, rng.standard_normal(12)
    xt = rng.standard_normal((9, 3)) if with_target else None
    w = compute_weights(model, representation(model, x), t)
    h = objective_h_phi(model, x, t, y, w, xt, cfg, 0.0).value
    ww = objective_w(model, x, t, xt, cfg, 4.0).value
    assert abs(h + ww - full_objective(model, x, t, y, xt, cfg, 4.0)) < 1e-10


def test_large_weight_penalty_drives_weights_uniform(rng):
    model, cfg = toy_model(rng, n_arms=1, lambda_w=1e6, randomize_w=False)
    # start from the standard init scale instead of the uniform zero-init
    last = model.weight_net.layers[-1]
    last.weight[:] = rng.standard_normal(last.weight.shape) * np.sqrt(1.0 / last.weight.shape[0])
    start = compute_weights(model, representation(model, rng.standard_normal((40, 3))), np.zeros(40, dtype=int))
    assert np.max(np.abs(start - 1)) > 0.05
    x, xt = rng.standard_normal((40, 3)), rng.standard_normal((40, 3)) - 0.5
    t = np.zeros(40, dtype=int)
    state = AdamState(lr=1e-3)
    for _ in range(500):
        r = objective_w(model, x, t, xt, cfg, 10.0)
        adam_step(state, model.weight_net, r.weight_grads)
    w = compute_weights(model, representation(model, x), t)
    assert np.max(np.abs(w - 1)) < 0.05


def test_uniform_weights_minimise_norm_term(rng):
    model, cfg = toy_model(rng, n_arms=1, lambda_w=1.0)
    x, t = rng.standard_normal((15, 3)), np.zeros(15, dtype=int)
    random_value = objective_w(model, x, t, None, cfg, 0.0).value
    for p in model.weight_net.params():
        p[:] = 0
    assert objective_w(model, x, t, None, cfg, 0.0).value == pytest.approx(math.sqrt(15) / 15)
    assert objective_w(model, x, t, None, cfg, 0.0).value <= random_value


def test_cate_imbalance_is_zero_when_arms_match_pool(rng):
    z = rng.standard_normal((4, 2))
    zz = np.vstack([z, z])
    t = np.array([0] * 4 + [1] * 4)
    value, _, _, _ = imbalance(zz, t, np.ones(8), None, TrainConfig().kernel)
    assert abs(value) < 1e-12


# ---------------------------------------------------------------- adaptive alpha


def test_adaptive_alpha_examples():
    assert lipschitz_estimate([0.0, 2.0], [[0.0], [1.0]]) == pytest.approx(2.0)
    s = AlphaState(alpha=1.0, decay=0.5)
    s = adaptive_alpha(s, [0.0, 2.0], [[0.0], [1.0]])
    assert s.alpha == pytest.approx(1.5) and s.last_raw == pytest.approx(2.0)
    s = AlphaState(alpha=1e-5, decay=0.5)
    for _ in range(40):
        s = adaptive_alpha(s, [1.0, 1.0, 1.0], [[0.0], [1.0], [2.0]])
    assert s.alpha == 1e-6
    frozen = AlphaState(alpha=3.0, decay=1.0)
    assert adaptive_alpha(frozen, [0.0, 9.0], [[0.0], [1.0]]).alpha == 3.0


def test_adaptive_alpha_keeps_state_on_degenerate_pairs():
    s = AlphaState(alpha=2.0, decay=0.9)
    assert adaptive_alpha(s, [0.0, 5.0], [[1.0, 1.0], [1.0, 1.0]]) is s
    with pytest.raises(ValueError):
        lipschitz_estimate([1.0], [[0.0]])


# ---------------------------------------------------------------- fit


def test_fit_is_deterministic():
    src, tgt, _, _ = ex.gen_synthetic_da(60, 60, 4, 3)
    cfg = ex.da_config(max_epochs=15, weight_layers=(6,), seed=11)
    m1, h1 = fit(src, tgt, cfg)
    m2, h2 = fit(src, tgt, cfg)
    assert h1 == h2
    assert all(np.array_equal(a, b) for a, b in zip(snapshot(m1.heads), snapshot(m2.heads)))


def test_fit_keeps_learned_weights_valid():
    src, tgt, _, _ = ex.gen_synthetic_da(100, 100, 10, 0)
    model, hist = fit(src, tgt, ex.da_config(max_epochs=40))
    w = compute_weights(model, representation(model, src.x), src.t)
    assert abs(w.mean() - 1) < 1e-9 and w.min() > 0
    assert len(hist.records) <= 40
    assert np.all(hist.column("weight_min") > 0)


def test_fit_matches_ols_with_alpha_zero_and_huge_weight_penalty():
    data = ex.gen_synthetic_cate(500, 5, 0, ex.CateSpec(gamma=0.5, effect="linear", noise=0.1))
    tr, va, te = ex.split_indices(500, 0)
    cfg = ex.cate_config(alpha=0.0, lambda_w=1e6, lambda_h=0.0, rep_layers=(), head_layers=(),
                         normalize_rep=False, weight_layers=(8,), learning_rate=1e-2, max_epochs=600)
    net, _ = fit(data.source(tr), None, cfg, data.source(va), n_arms=2)
    ols = ols_fit(data.x[tr], data.t[tr], data.y_factual[tr], 2)

    def rmse(m):
        return np.sqrt(np.mean((m.predict(data.x[te], data.t[te]) - data.y_factual[te]) ** 2))

    assert abs(rmse(net) - rmse(ols)) <= 0.1 * rmse(ols)


def test_fit_aborts_with_diagnostics_on_nan():
    src = SourceSample(np.random.default_rng(0).standard_normal((20, 2)), np.zeros(20), np.full(20, np.nan))
    with pytest.raises(NumericalError, match="epoch 0, step 0"):
        fit(src, TargetSample(np.zeros((5, 2)), np.zeros(5)), ex.da_config(max_epochs=2))


def test_early_stopping_returns_best_epoch():
    data = ex.gen_synthetic_cate(200, 3, 1)
    tr, va, _ = ex.split_indices(200, 1)
    cfg = ex.cate_config(max_epochs=30, patience=3, learning_rate=0.05)
    _, hist = fit(data.source(tr), None, cfg, data.source(va), n_arms=2)
    val = hist.column("validation")
    assert hist.best_epoch == int(np.argmin(val))


def test_model_json_round_trip(tmp_path, rng):
    model, cfg = toy_model(rng)
    path = tmp_path / "m.json"
    model.save(path, cfg)
    back = RcfrModel.load(path)
    x, t = rng.standard_normal((6, 3)), np.arange(6) % 2
    assert np.array_equal(model.predict(x, t), back.predict(x, t))
    assert back.n_arms == 2 and back.rep_dim == 4
