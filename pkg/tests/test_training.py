"""Tests for the training module: loss, Adam, train loop, checkpoints, HyperBand."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluxgpp import gradkit as gk
from fluxgpp import training
from fluxgpp.dataset import SampleSet, SiteNorm
from fluxgpp.gradkit import NonFiniteError
from fluxgpp.models import LstmConfig, TransformerConfig
from fluxgpp.training import (
    Checkpoint,
    HyperbandConfig,
    TrainConfig,
    TrainingError,
    build_model,
    get_hyperband_schedule,
    hyperband,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    smoothed_mae_loss,
    train,
)

# ------------------------------------------------------------------- loss


def test_loss_zero_at_exact_fit():
    t = np.array([0.5, -1.25, 3.0])
    loss = smoothed_mae_loss(gk.Tensor(t.copy()), t)
    assert loss.data == 0.0


def test_loss_hand_value():
    loss = smoothed_mae_loss(gk.Tensor(np.array([1.0, 3.0])), np.array([2.0, 2.0]))
    assert loss.data == pytest.approx(1.0)


def test_loss_gradient_is_sign_over_n():
    preds = gk.Tensor(np.array([0.5, 3.0, -2.0]), requires_grad=True)
    loss = smoothed_mae_loss(preds, np.array([1.0, 1.0, 1.0]))
    loss.backward()
    np.testing.assert_array_equal(preds.grad, np.array([-1.0, 1.0, -1.0]) / 3.0)


def test_loss_gradient_matches_finite_differences():
    targets = np.array([0.3, -0.7, 1.1, 0.0])
    x0 = np.array([1.0, 0.5, -0.4, 2.0])  # away from ties, |.| is smooth
    err = gk.finite_diff_check(lambda p: smoothed_mae_loss(p, targets), x0)
    assert err < 1e-8


def test_loss_empty_batch_raises():
    with pytest.raises(TrainingError):
        smoothed_mae_loss(gk.Tensor(np.zeros(0)), np.zeros(0))


def test_loss_shape_mismatch_raises():
    with pytest.raises(TrainingError):
        smoothed_mae_loss(gk.Tensor(np.zeros(3)), np.zeros(4))


@given(
    st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8),
    st.integers(0, 7),
    st.floats(1e-6, 1e3),
)
@settings(max_examples=50, deadline=None)
def test_loss_nonnegative_and_zero_iff_equal(values, where, delta):
    t = np.array(values)
    assert smoothed_mae_loss(gk.Tensor(t.copy()), t).data == 0.0
    bumped = t.copy()
    bumped[where % len(values)] += delta
    assert smoothed_mae_loss(gk.Tensor(bumped), t).data > 0.0


# ------------------------------------------------------------------- Adam


def test_zero_gradient_is_fixed_point():
    params = {"w": np.array([1.0, -2.0]), "b": np.array([[0.5]])}
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    out, state = sgd_step(params, grads, 0.1)
    for k in params:
        np.testing.assert_array_equal(out[k], params[k])
    out2, _ = sgd_step(out, grads, 0.1, state)
    for k in params:
        np.testing.assert_array_equal(out2[k], params[k])


def test_first_step_moves_by_lr_sign():
    # bias correction makes m_hat/sqrt(v_hat) = g/|g| on step one
    rng = np.random.default_rng(7)
    g = rng.normal(size=12)
    g[np.abs(g) < 0.1] += 0.5  # keep |g| well above eps
    params = {"w": rng.normal(size=12)}
    out, _ = sgd_step(params, {"w": g}, 0.01)
    np.testing.assert_allclose(out["w"] - params["w"], -0.01 * np.sign(g), rtol=1e-6)


def test_quadratic_convergence():
    # minimize (x - 0.3)^2 from unit distance
    p = {"x": np.array([1.3])}
    state = None
    for _ in range(500):
        p, state = sgd_step(p, {"x": 2 * (p["x"] - 0.3)}, 0.01, state)
    assert abs(p["x"][0] - 0.3) < 1e-3


def test_nonfinite_gradient_raises():
    with pytest.raises(NonFiniteError):
        sgd_step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])}, 0.1)
    with pytest.raises(NonFiniteError):
        sgd_step({"w": np.ones(2)}, {"w": np.array([np.inf, 0.0])}, 0.1)


def test_key_mismatch_raises():
    with pytest.raises(TrainingError):
        sgd_step({"w": np.ones(2)}, {"v": np.ones(2)}, 0.1)


def test_clip_norm_rescales_first_moment():
    g = np.array([3.0, 4.0])  # global norm 5
    _, state = sgd_step({"w": np.zeros(2)}, {"w": g}, 0.1, clip_norm=1.0)
    np.testing.assert_allclose(state.m["w"], (1 - 0.9) * g / 5.0, rtol=1e-12)
    _, state = sgd_step({"w": np.zeros(2)}, {"w": g}, 0.1, clip_norm=10.0)
    np.testing.assert_array_equal(state.m["w"], (1 - 0.9) * g)  # below threshold: untouched


def test_sgd_step_is_functional():
    params = {"w": np.array([1.0, 2.0])}
    grads = {"w": np.array([0.5, -0.5])}
    p_copy, g_copy = params["w"].copy(), grads["w"].copy()
    out, _ = sgd_step(params, grads, 0.1)
    np.testing.assert_array_equal(params["w"], p_copy)
    np.testing.assert_array_equal(grads["w"], g_copy)
    assert out["w"] is not params["w"]


# -------------------------------------------------------------- HyperBand


def test_schedule_r81_table():
    brackets = get_hyperband_schedule(81, 3)
    assert [b.s for b in brackets] == [4, 3, 2, 1, 0]
    assert [b.rungs[0] for b in brackets] == [(81, 1), (27, 3), (9, 9), (6, 27), (5, 81)]
    assert brackets[0].rungs == ((81, 1), (27, 3), (9, 9), (3, 27), (1, 81))
    assert brackets[-1].rungs == ((5, 81),)


def test_schedule_r27_and_r9_tables():
    assert [b.rungs[0] for b in get_hyperband_schedule(27, 3)] == [
        (27, 1),
        (9, 3),
        (6, 9),
        (4, 27),
    ]
    assert [b.rungs[0] for b in get_hyperband_schedule(9, 3)] == [(9, 1), (3, 3), (3, 9)]


def test_schedule_budget_bound():
    for resource in (9, 27, 81):
        brackets = get_hyperband_schedule(resource, 3)
        cap = resource * len(brackets)
        assert all(b.budget <= cap for b in brackets)
    # the outermost and innermost brackets of R=81 hit the bound exactly
    brackets = get_hyperband_schedule(81, 3)
    assert brackets[0].budget == brackets[-1].budget == 405


def test_schedule_bad_args_raise():
    with pytest.raises(TrainingError):
        get_hyperband_schedule(1, 3)
    with pytest.raises(TrainingError):
        get_hyperband_schedule(27, 1)


def _stub_train_fn(loss_of):
    def train_fn(config, epochs):
        return loss_of(config), {"config": dict(config), "epochs": epochs}

    return train_fn


def test_hyperband_single_point_space():
    cfg = HyperbandConfig(resource=9, eta=3, space=(("lr", (0.05,)),))
    result = hyperband(cfg, _stub_train_fn(lambda c: c["lr"]), seed=0)
    assert result.best_config == {"lr": 0.05}
    assert all(row["config"] == {"lr": 0.05} for row in result.log)
    expected_rows = sum(n for b in result.schedule for n, _ in b.rungs)
    assert len(result.log) == expected_rows


def test_hyperband_best_is_min_of_evaluated():
    cfg = HyperbandConfig(
        resource=27,
        eta=3,
        space=(("lr", (0.3, 0.1, 0.03, 0.01)), ("hidden", (8, 16, 32))),
    )
    result = hyperband(cfg, _stub_train_fn(lambda c: abs(c["lr"] - 0.03) + c["hidden"] / 1e4), seed=1)
    finite = [row["loss"] for row in result.log if math.isfinite(row["loss"])]
    assert result.best_loss == min(finite)
    assert result.best_config["lr"] == 0.03


def test_hyperband_deterministic_given_seed():
    cfg = HyperbandConfig(resource=9, eta=3, space=(("lr", (0.3, 0.1, 0.03, 0.01)),))
    fn = _stub_train_fn(lambda c: c["lr"])
    a = hyperband(cfg, fn, seed=5)
    b = hyperband(cfg, fn, seed=5)
    assert a.log == b.log and a.best_config == b.best_config
    c = hyperband(cfg, fn, seed=6)
    assert [r["config"] for r in c.log] != [r["config"] for r in a.log]


def test_hyperband_budget_assertable_from_logs():
    cfg = HyperbandConfig(resource=27, eta=3, space=(("lr", (0.3, 0.1, 0.03, 0.01)),))
    result = hyperband(cfg, _stub_train_fn(lambda c: c["lr"]), seed=2)
    per_bracket = {b.s: b.budget for b in result.schedule}
    cap = cfg.resource * len(result.schedule)
    for s, budget in per_bracket.items():
        spent = sum(row["epochs"] for row in result.log if row["bracket"] == s)
        assert spent == budget <= cap


def test_hyperband_promotes_by_loss():
    cfg = HyperbandConfig(resource=9, eta=3, space=(("lr", (0.4, 0.3, 0.2, 0.1)),))
    result = hyperband(cfg, _stub_train_fn(lambda c: c["lr"]), seed=3)
    rung0 = sorted(row["loss"] for row in result.log if row["bracket"] == 2 and row["rung"] == 0)
    rung1 = sorted(row["loss"] for row in result.log if row["bracket"] == 2 and row["rung"] == 1)
    assert rung1 == rung0[:3]  # survivors are exactly the three smallest losses


def test_hyperband_drops_diverged_configs():
    space = (("lr", (0.3, 0.1)),)
    fn = _stub_train_fn(lambda c: math.inf if c["lr"] == 0.3 else c["lr"])
    result = hyperband(HyperbandConfig(resource=9, eta=3, space=space), fn, seed=4)
    assert result.best_config == {"lr": 0.1}
    assert math.isfinite(result.best_loss)


def test_hyperband_all_diverged_raises():
    cfg = HyperbandConfig(resource=9, eta=3, space=(("lr", (0.3,)),))
    with pytest.raises(TrainingError):
        hyperband(cfg, _stub_train_fn(lambda c: math.nan), seed=0)


def test_hyperband_empty_space_rejected():
    with pytest.raises(TrainingError):
        HyperbandConfig(resource=9, eta=3, space=())
    with pytest.raises(TrainingError):
        HyperbandConfig(resource=9, eta=3, space=(("lr", ()),))


# ------------------------------------------------------------- train loop


K = 20  # short contexts keep these tests fast


def _toy_sets(n=96, k=K, seed=0, smooth_shrink=1.0):
    """One-site sample set whose target is a linear readout of the last row."""
    rng = np.random.default_rng(seed)
    contexts = rng.normal(size=(n, k, 28))
    targets = contexts[:, -1, 0] + 0.5 * contexts[:, -1, 1]
    dates = np.arange("2016-01-01", "2016-01-01", dtype="datetime64[D]")  # placeholder
    dates = np.repeat(np.datetime64("2016-06-01"), n) + np.arange(n)
    sset = SampleSet(
        site_ids=np.array(["SYNA"] * n, dtype=object),
        target_dates=dates,
        contexts=contexts,
        targets=targets,
        targets_smoothed=smooth_shrink * targets,
    )
    norms = {
        "SYNA": SiteNorm(
            token_mean=np.zeros(28), token_std=np.ones(28), gpp_mean=0.0, gpp_std=1.0
        )
    }
    split = int(0.75 * n)
    return sset.select(np.arange(split)), sset.select(np.arange(split, n)), norms


def _lstm_cfg(**kw):
    return LstmConfig(hidden_size=8, num_layers=1, dropout=kw.pop("dropout", 0.0), n_features=28)


def test_train_loss_decreases():
    train_set, val_set, norms = _toy_sets()
    cfg = TrainConfig(max_epochs=6, batch_size=32, learning_rate=0.01, seed=0, dropout=0.0)
    result = train("lstm", _lstm_cfg(), cfg, train_set, val_set, norms)
    assert not result.diverged
    assert len(result.history) == 6
    assert all(np.isfinite(row["train_loss"]) for row in result.history)
    assert result.history[-1]["train_loss"] < result.history[0]["train_loss"]


def test_train_checkpoint_is_validation_argmin():
    train_set, val_set, norms = _toy_sets(seed=1)
    cfg = TrainConfig(max_epochs=5, batch_size=32, learning_rate=0.01, seed=1, dropout=0.0)
    result = train("lstm", _lstm_cfg(), cfg, train_set, val_set, norms)
    ckpt = result.checkpoint
    assert all(ckpt.validation_loss <= row["val_loss"] for row in result.history)
    if ckpt.epoch > 0:
        assert ckpt.validation_loss == result.history[ckpt.epoch - 1]["val_loss"]


def test_train_two_runs_bitwise_identical():
    train_set, val_set, norms = _toy_sets(seed=2)
    cfg = TrainConfig(max_epochs=3, batch_size=32, learning_rate=0.01, seed=3, dropout=0.0)
    a = train("lstm", _lstm_cfg(), cfg, train_set, val_set, norms)
    b = train("lstm", _lstm_cfg(), cfg, train_set, val_set, norms)
    assert a.history == b.history
    assert a.checkpoint.validation_loss == b.checkpoint.validation_loss
    assert a.checkpoint.params.keys() == b.checkpoint.params.keys()
    for k in a.checkpoint.params:
        np.testing.assert_array_equal(a.checkpoint.params[k], b.checkpoint.params[k])


def test_train_seed_changes_result():
    train_set, val_set, norms = _toy_sets(seed=2)
    kw = dict(max_epochs=2, batch_size=32, learning_rate=0.01, dropout=0.0)
    a = train("lstm", _lstm_cfg(), TrainConfig(seed=0, **kw), train_set, val_set, norms)
    b = train("lstm", _lstm_cfg(), TrainConfig(seed=1, **kw), train_set, val_set, norms)
    assert any(
        not np.array_equal(a.checkpoint.params[k], b.checkpoint.params[k])
        for k in a.checkpoint.params
    )


def test_train_empty_set_raises():
    train_set, val_set, norms = _toy_sets()
    empty = train_set.select(np.arange(0))
    with pytest.raises(TrainingError):
        train("lstm", _lstm_cfg(), TrainConfig(), empty, val_set, norms)
    with pytest.raises(TrainingError):
        train("lstm", _lstm_cfg(), TrainConfig(), train_set, empty, norms)


def test_train_divergence_returns_best_finite_checkpoint(monkeypatch):
    train_set, val_set, norms = _toy_sets(seed=4)
    calls = {"n": 0}
    real = training.smoothed_mae_loss

    def explode_on_third(preds, targets):
        calls["n"] += 1
        if calls["n"] >= 3:  # two 48-sample batches per epoch: blow up in epoch 2
            raise NonFiniteError("synthetic overflow")
        return real(preds, targets)

    monkeypatch.setattr(training, "smoothed_mae_loss", explode_on_third)
    cfg = TrainConfig(max_epochs=10, batch_size=48, learning_rate=0.01, seed=0, dropout=0.0)
    result = train("lstm", _lstm_cfg(), cfg, train_set, val_set, norms)
    assert result.diverged
    assert len(result.history) == 1
    assert np.isfinite(result.checkpoint.validation_loss)
    assert result.checkpoint.epoch in (0, 1)


def test_train_gpt2_smoke_with_dropout():
    train_set, val_set, norms = _toy_sets(n=64, seed=5)
    mc = TransformerConfig(
        model_dim=16, ff_dim=32, num_heads=2, num_layers=1, dropout=0.3, max_positions=K
    )
    cfg = TrainConfig(max_epochs=2, batch_size=32, learning_rate=0.003, seed=0, dropout=0.3)
    result = train("gpt2", mc, cfg, train_set, val_set, norms)
    assert not result.diverged
    assert all(np.isfinite(row["val_loss"]) for row in result.history)


def test_val_metric_definitions_match_reported_loss():
    # raw: MAE against unsmoothed targets; smoothed: against smoothed ones
    train_set, val_set, norms = _toy_sets(seed=6, smooth_shrink=0.9)
    out = {}
    for metric in ("raw", "smoothed"):
        cfg = TrainConfig(
            max_epochs=2, batch_size=32, learning_rate=0.01, seed=0, dropout=0.0,
            val_metric=metric,
        )
        out[metric] = train("lstm", _lstm_cfg(), cfg, train_set, val_set, norms)
    model = build_model(out["raw"].checkpoint)
    preds = model.predict(val_set.contexts)  # identity norms: no standardization
    expect = float(np.mean(np.abs(preds - val_set.targets)))
    assert out["raw"].checkpoint.validation_loss == pytest.approx(expect, rel=1e-12)
    assert out["raw"].checkpoint.validation_loss != out["smoothed"].checkpoint.validation_loss


# ------------------------------------------------------------ checkpoints


def test_checkpoint_roundtrip_is_bitwise_stable(tmp_path):
    train_set, val_set, norms = _toy_sets(seed=7)
    cfg = TrainConfig(max_epochs=2, batch_size=32, learning_rate=0.01, seed=0, dropout=0.0)
    result = train("lstm", _lstm_cfg(), cfg, train_set, val_set, norms)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_checkpoint(result.checkpoint, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.model_config == result.checkpoint.model_config
    assert loaded.train_config == result.checkpoint.train_config
    assert loaded.epoch == result.checkpoint.epoch
    for k in result.checkpoint.params:
        np.testing.assert_array_equal(loaded.params[k], result.checkpoint.params[k])
    a = build_model(result.checkpoint).predict(val_set.contexts)
    b = build_model(loaded).predict(val_set.contexts)
    np.testing.assert_array_equal(a, b)


def test_checkpoint_rejects_bad_version_or_kind(tmp_path):
    train_set, val_set, norms = _toy_sets(seed=8)
    cfg = TrainConfig(max_epochs=1, batch_size=32, learning_rate=0.01, seed=0, dropout=0.0)
    ckpt = train("lstm", _lstm_cfg(), cfg, train_set, val_set, norms).checkpoint
    path = tmp_path / "ckpt.json"
    save_checkpoint(ckpt, path)

    payload = json.loads(path.read_text())
    payload["format_version"] = 99
    path.write_text(json.dumps(payload))
    with pytest.raises(TrainingError):
        load_checkpoint(path)

    payload["format_version"] = 1
    payload["model_kind"] = "gru"
    path.write_text(json.dumps(payload))
    with pytest.raises(TrainingError):
        load_checkpoint(path)


def test_checkpoint_requires_finite_validation_loss():
    with pytest.raises(TrainingError):
        Checkpoint(
            model_kind="lstm",
            model_config=_lstm_cfg(),
            train_config=TrainConfig(),
            epoch=1,
            validation_loss=float("nan"),
            norms={},
            params={},
        )
