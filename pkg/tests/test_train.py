import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshvox import kernels as K
from meshvox import train as T
from meshvox.meshnet import MeshNetConfig, capped_dilations, from_weights, init_model
from meshvox.phantom import make_dataset
from meshvox.train import (
    AdamWState,
    NonFiniteError,
    OptimizerConfig,
    ScheduleConfig,
    TrainRunConfig,
    adamw_step,
    grad_check,
    onecycle_lr,
    parse_train_config,
)

RECIPE_OPT = OptimizerConfig(lr_max=1e-3, weight_decay=3e-5, eps=1e-4, betas=(0.9, 0.999))


def scalar_adamw(theta, grads, lr, b1, b2, eps, wd):
    """Plain-float reference, one line per textbook step."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta = theta - lr * (m_hat / (math.sqrt(v_hat) + eps) + wd * theta)
    return theta


# -- AdamW ---------------------------------------------------------------------------


def test_adamw_single_step():
    p = [np.ones(3)]
    adamw_step(p, [np.ones(3)], AdamWState.zeros_like(p), RECIPE_OPT, 1e-3)
    expected = 1 - 1e-3 * (1 / (1 + 1e-4) + 3e-5)
    np.testing.assert_allclose(p[0], expected, rtol=0, atol=1e-15)


def test_adamw_two_steps_match_scalar_oracle():
    p = [np.array([0.7, -1.3])]
    state = AdamWState.zeros_like(p)
    g = np.array([0.25, -2.0])
    for _ in range(2):
        adamw_step(p, [g.copy()], state, RECIPE_OPT, 1e-3)
    for i in range(2):
        ref = scalar_adamw([0.7, -1.3][i], [g[i]] * 2, 1e-3, 0.9, 0.999, 1e-4, 3e-5)
        assert abs(p[0][i] - ref) < 1e-12


@settings(max_examples=50, deadline=None)
@given(
    st.floats(-5, 5),
    st.lists(st.floats(-10, 10), min_size=1, max_size=6),
    st.floats(1e-5, 1e-1),
    st.floats(0, 1e-2),
)
def test_adamw_matches_scalar_oracle(theta, grads, lr, wd):
    opt = OptimizerConfig(lr, wd, 1e-4)
    p = [np.array([theta])]
    state = AdamWState.zeros_like(p)
    for g in grads:
        adamw_step(p, [np.array([g])], state, opt, lr)
    ref = scalar_adamw(theta, grads, lr, 0.9, 0.999, 1e-4, wd)
    assert abs(p[0][0] - ref) <= 1e-12 * max(1.0, abs(ref))


def test_adamw_zero_gradient_no_decay_is_identity():
    p = [np.linspace(-1, 1, 7)]
    before = p[0].copy()
    state = AdamWState.zeros_like(p)
    for _ in range(3):
        adamw_step(p, [np.zeros(7)], state, OptimizerConfig(1e-3, 0.0), 1e-3)
    assert np.array_equal(p[0], before)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(0.01, 3), st.floats(1e-4, 1e-2))
def test_adamw_large_eps_approaches_scaled_sgd(theta, g, lr):
    eps = 1e8
    p = [np.array([theta])]
    adamw_step(p, [np.array([g])], AdamWState.zeros_like(p), OptimizerConfig(lr, 0.0, eps), lr)
    # m_hat / (sqrt(v_hat) + eps) -> g / eps
    sgd = theta - lr * g / eps
    assert abs(p[0][0] - sgd) <= 1e-6 * lr * abs(g) / eps + 1e-18


def test_adamw_non_finite_gradient_names_layer():
    p = [np.ones(2), np.ones(3)]
    with pytest.raises(NonFiniteError, match="layer 4") as exc:
        adamw_step(p, [np.ones(2), np.array([1.0, np.nan, 0.0])], AdamWState.zeros_like(p), RECIPE_OPT, 1e-3,
                   names=[(3, "conv_w"), (4, "bn_gamma")])
    assert exc.value.layer == 4 and exc.value.role == "bn_gamma"


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(lr_max=-1)
    with pytest.raises(ValueError):
        OptimizerConfig(betas=(1.0, 0.9))


# -- schedule -----------------------------------------------------------------------------


def test_onecycle_anchors():
    s = ScheduleConfig(1e-3, 0.01, 100, 1e4, 1000)
    assert onecycle_lr(0, s) == 1e-5
    assert s.peak_step == 10
    assert onecycle_lr(10, s) == 1e-3
    assert onecycle_lr(999, s) == 1e-3 / 1e4


def test_onecycle_mid_decay_closed_form():
    s = ScheduleConfig(1e-3, 0.01, 100, 1e4, 1000)
    step = 500
    pct = (step - 10) / (999 - 10)
    lo = 1e-7
    expected = lo + (1e-3 - lo) * (1 + math.cos(math.pi * pct)) / 2
    assert onecycle_lr(step, s) == pytest.approx(expected, rel=1e-14)
    ramp = onecycle_lr(5, s)
    assert ramp == pytest.approx(1e-5 + (1e-3 - 1e-5) * (1 - math.cos(math.pi * 0.5)) / 2, rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 5000), st.floats(0.001, 0.5))
def test_onecycle_shape(total, frac):
    s = ScheduleConfig(1e-3, frac, 100, 1e4, total)
    lrs = np.array([onecycle_lr(t, s) for t in range(total)])
    peak = s.peak_step
    assert lrs.max() == 1e-3 == lrs[peak]
    assert np.all(np.diff(lrs[: peak + 1]) >= 0) and np.all(np.diff(lrs[peak:]) <= 0)
    assert lrs.min() >= 1e-7 * (1 - 1e-12)
    # continuity at the boundary: neighbours of the peak are close to it
    step_size = max(np.pi / max(peak, 1), np.pi / (total - 1 - peak))
    assert abs(lrs[peak + 1] - lrs[peak]) <= 1e-3 * step_size


def test_onecycle_range_checked():
    s = ScheduleConfig(total_steps=10)
    with pytest.raises(ValueError):
        onecycle_lr(10, s)
    with pytest.raises(ValueError):
        onecycle_lr(-1, s)
    with pytest.raises(ValueError):
        ScheduleConfig(warmup_frac=0.0)


# -- training loop -------------------------------------------------------------------------


def small_task():
    cfg = MeshNetConfig(2, capped_dilations(2))
    data = make_dataset(3, shape=(10, 10, 10), seed=5, radii=(2.0, 3.0))
    val = make_dataset(2, shape=(10, 10, 10), seed=6, radii=(2.0, 3.0))
    return cfg, data, val


def test_zero_learning_rate_keeps_weights():
    cfg, data, _ = small_task()
    model = init_model(cfg, 0)
    run = TrainRunConfig(epochs=1, optimizer=OptimizerConfig(lr_max=0.0))
    ws, _ = T.train(model, data, run)
    for (i, r, a), (_, _, b) in zip(model.weight_set(), ws):
        if r in ("bn_mean", "bn_var"):
            continue  # running statistics still track the batches
        assert np.array_equal(a, b)


def test_same_seed_same_history():
    cfg, data, val = small_task()
    run = TrainRunConfig(epochs=2, restarts=2, seed=7)
    ws1, h1 = T.train(cfg, data, run, val_set=val)
    ws2, h2 = T.train(cfg, data, run, val_set=val)
    assert h1 == h2
    assert all(a.tobytes() == b.tobytes() for (_, _, a), (_, _, b) in zip(ws1, ws2))


def test_best_restart_is_returned():
    cfg, data, val = small_task()
    run = TrainRunConfig(epochs=2, restarts=3, seed=1)
    ws, history = T.train(cfg, data, run, val_set=val)
    assert len(history) == 6 and {row["restart"] for row in history} == {0, 1, 2}
    assert T.validation_dice(from_weights(cfg, ws), val) == max(row["val_dice"] for row in history)


def test_mixed_shapes_rejected():
    cfg, data, _ = small_task()
    odd = make_dataset(1, shape=(12, 12, 12), seed=0, radii=(2.0, 3.0))
    with pytest.raises(ValueError, match="shape"):
        T.train(cfg, data + odd, TrainRunConfig(epochs=1))
    with pytest.raises(ValueError):
        T.train(cfg, [], TrainRunConfig(epochs=1))


def test_non_finite_loss_aborts():
    cfg, data, _ = small_task()
    v, m = data[0]
    bad = v.data.copy()
    bad[0, 0, 0] = np.inf
    with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
        T.loss_and_grads(init_model(cfg, 0), bad[None], m.data, K.LossSpec())


def test_history_csv(tmp_path):
    cfg, data, _ = small_task()
    _, history = T.train(cfg, data, TrainRunConfig(epochs=2))
    out = tmp_path / "h.csv"
    T.write_history_csv(history, out)
    lines = out.read_text().splitlines()
    assert lines[0] == "epoch,step,lr,loss,val_dice,restart" and len(lines) == 3


# -- gradient check ---------------------------------------------------------------------


def test_grad_check_small_network():
    model = init_model(MeshNetConfig(1), 0)
    rng = np.random.default_rng(0)
    x = rng.random((1, 6, 6, 6))
    y = (rng.random((6, 6, 6)) < 0.3).astype(np.uint8)
    report = grad_check(model, (x, y), tolerance=1e-4)
    assert report.passed, report
    assert report.max_rel_error < 1e-4 and report.n_checked > 20


def test_grad_check_zero_input():
    model = init_model(MeshNetConfig(2), 0)
    report = grad_check(model, (np.zeros((1, 6, 6, 6)), np.zeros((6, 6, 6), np.uint8)))
    assert report.finite


def test_grad_check_flags_corrupted_backward(monkeypatch):
    model = init_model(MeshNetConfig(1), 0)
    rng = np.random.default_rng(0)
    sample = (rng.random((1, 6, 6, 6)), (rng.random((6, 6, 6)) < 0.3).astype(np.uint8))
    real = K.activation_backward
    monkeypatch.setattr(K, "activation_backward", lambda x, g, kind="relu": 1.5 * real(x, g, kind))
    report = grad_check(model, sample)
    assert not report.passed and report.max_rel_error > 1e-2


# -- config files ---------------------------------------------------------------------------


def test_config_defaults_match_recipe():
    net, run = parse_train_config("")
    assert net.channels == 5 and net.dilations == (1, 2, 4, 8, 16, 16, 8, 4, 2)
    assert run.epochs == 50 and run.restarts == 10
    assert run.optimizer == RECIPE_OPT
    assert run.loss.label_smoothing == 0.01 and run.loss.class_weights == (0.5, 1.0)
    assert run.warmup_frac == 0.01 and run.start_div == 100


def test_config_overrides_and_errors():
    net, run = parse_train_config("[model]\nchannels = 3\ndilations = 1,2,2,2,2,2,2,2,2\n[run]\nepochs = 4\n")
    assert net.channels == 3 and run.epochs == 4
    with pytest.raises(ValueError, match="unknown"):
        parse_train_config("[model]\nwidth = 3\n")
    with pytest.raises(ValueError, match="unknown"):
        parse_train_config("[extras]\nx = 1\n")
