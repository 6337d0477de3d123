import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import clean_windows
from rrwave import tensor as T
from rrwave.errors import ConfigMismatch, EmptySplit, InvalidConfig, NonFiniteLoss, ShapeMismatch
from rrwave.model import Model
from rrwave.train import (EpochMonitor, OptimizerState, TrainConfig, adabelief_step, as_arrays, finetune, fit,
                          mse_loss)


def scalar_adabelief(theta, grad_fn, steps, lr=1e-4, b1=0.9, b2=0.999, eps=1e-13):
    """Plain-float reference of the AdaBelief recurrence."""
    m = s = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(theta, t)
        m = b1 * m + (1 - b1) * g
        s = b2 * s + (1 - b2) * (g - m) ** 2 + eps
        m_hat = m / (1 - b1 ** t)
        s_hat = s / (1 - b2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(s_hat) + eps)
        out.append(theta)
    return out


def run_step_fn(theta, grad_fn, steps, **kw):
    p = {"x": np.array([theta])}
    state = OptimizerState()
    out = []
    for t in range(1, steps + 1):
        adabelief_step(p, {"x": np.array([grad_fn(p["x"][0], t)])}, state, **kw)
        out.append(p["x"][0])
    return out


# ---------------------------------------------------------------- loss


def test_mse_identity():
    assert float(mse_loss(np.ones((3, 1)), np.ones((3, 1))).data) == 0.0


def test_mse_hand_case():
    assert float(mse_loss(np.array([[1.0], [-1.0]]), np.zeros((2, 1))).data) == 1.0


def test_mse_gradient():
    p = T.Tensor(np.array([[2.0], [0.5], [-1.0]]), requires_grad=True)
    t = np.array([[1.0], [1.0], [1.0]])
    T.backward(mse_loss(p, t))
    np.testing.assert_allclose(p.grad, 2 * (p.data - t) / 3, rtol=1e-15)


def test_mse_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        mse_loss(np.zeros((2, 1)), np.zeros((3, 1)))


# ---------------------------------------------------------------- AdaBelief


def test_adabelief_first_step_hand_value():
    (theta,) = run_step_fn(0.0, lambda th, t: 1.0, 1, lr=1e-4)
    # m_hat = 1, s_hat = 0.81 + eps/(1 - b2); step = lr / (0.9 + ...)
    expected = -1e-4 / (math.sqrt(0.81 + 1e-13 / 1e-3) + 1e-13)
    assert abs(theta - expected) < 1e-12


def test_adabelief_matches_scalar_reference():
    def grad(th, t):
        return 2.0 * (th - 3.0) + math.sin(t)

    ours = run_step_fn(0.5, grad, 10, lr=1e-2)
    ref = scalar_adabelief(0.5, grad, 10, lr=1e-2)
    assert max(abs(a - b) for a, b in zip(ours, ref)) < 1e-12


def test_adabelief_zero_grad_keeps_params():
    p = {"w": np.array([0.3, -1.2])}
    adabelief_step(p, {"w": np.zeros(2)}, OptimizerState(), lr=1e-3)
    np.testing.assert_array_equal(p["w"], [0.3, -1.2])


@given(st.floats(-10, 10), st.floats(-5, 5))
def test_adabelief_elementwise_symmetry(g, theta):
    p = {"a": np.array([theta]), "b": np.array([theta])}
    adabelief_step(p, {"a": np.array([g]), "b": np.array([g])}, OptimizerState(), lr=1e-3)
    assert p["a"][0] == p["b"][0]


def test_adabelief_state_is_nonnegative():
    rng = np.random.default_rng(0)
    p, state = {"w": rng.normal(size=5)}, OptimizerState()
    for _ in range(20):
        adabelief_step(p, {"w": rng.normal(size=5)}, state, lr=1e-3)
        assert np.all(state.s["w"] >= 0)
    assert state.t == 20


def test_adabelief_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adabelief_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, OptimizerState(), lr=1e-3)


@pytest.mark.parametrize("g", [0.1, 1.0, 1e3, -7.5])
def test_adabelief_constant_stream_acts_like_sign_sgd(g):
    # s only sees the decaying deviation g - m, so the step depends on sign(g) only
    ref = np.diff([0.0] + run_step_fn(0.0, lambda th, t: 1.0, 10, lr=1e-4))
    steps = np.diff([0.0] + run_step_fn(0.0, lambda th, t: g, 10, lr=1e-4))
    assert np.all(np.sign(steps) == -np.sign(g))
    np.testing.assert_allclose(steps, np.sign(g) * ref, rtol=1e-6)
    assert abs(abs(steps[0]) - 1e-4 / 0.9) < 1e-9


# ---------------------------------------------------------------- schedule


def drive(losses, **kw):
    mon, lr = EpochMonitor(**kw), 1.0
    decays, stop_at = [], None
    for epoch, v in enumerate(losses, start=1):
        _, lr, decayed, stop = mon.update(epoch, v, lr)
        if decayed:
            decays.append(epoch)
        if stop:
            stop_at = epoch
            break
    return decays, stop_at, lr


def test_constant_loss_decays_once_then_stops():
    decays, stop_at, lr = drive([1.0] * 20)
    assert decays == [5] and stop_at == 6 and lr == 0.25


def test_decreasing_loss_never_decays():
    decays, stop_at, lr = drive([10.0 - 0.1 * i for i in range(50)])
    assert decays == [] and stop_at is None and lr == 1.0


def test_equal_loss_is_not_an_improvement():
    decays, stop_at, _ = drive([3.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0])
    assert decays == [6] and stop_at == 7


def test_improvement_resets_both_counters():
    decays, stop_at, _ = drive([5.0, 5.0, 5.0, 5.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0])
    assert decays == [9] and stop_at == 10


def test_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig(plateau_factor=1.0)
    with pytest.raises(InvalidConfig):
        TrainConfig(early_stop_patience=0)
    with pytest.raises(InvalidConfig):
        TrainConfig.from_dict({"learning_rate": 1e-3})


# ---------------------------------------------------------------- fit


@pytest.fixture(scope="module")
def small_data():
    wins = clean_windows(6, seed=5)
    return wins[:4], wins[4:]


def test_fit_constant_val_loss_events(tiny_config, small_data):
    model = Model.build(dataclasses.replace(tiny_config, bn_momentum=0.0), seed=0)
    res = fit(model, *small_data, TrainConfig(lr=0.0, max_epochs=50, batch_size=2))
    assert res.best_epoch == 1
    assert res.decay_epochs == [5]
    assert res.stop_epoch == 6 and len(res.history) == 6
    assert [r.lr for r in res.history] == [0.0] * 6


def test_fit_is_deterministic(tiny_config, small_data):
    cfg = TrainConfig(lr=1e-3, max_epochs=3, batch_size=2, seed=11)
    a = fit(Model.build(tiny_config, seed=1), *small_data, cfg)
    b = fit(Model.build(tiny_config, seed=1), *small_data, cfg)
    assert a.history == b.history
    assert a.best_checkpoint.to_bytes() == b.best_checkpoint.to_bytes()


def test_fit_invariants(tiny_config, small_data):
    res = fit(Model.build(tiny_config, seed=2), *small_data, TrainConfig(lr=1e-3, max_epochs=6, batch_size=2))
    lrs = [r.lr for r in res.history]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert res.best_val_loss == min(r.val_mse for r in res.history)
    assert res.best_checkpoint.meta["epoch"] == res.best_epoch


def test_fit_returns_best_state(tiny_config, small_data):
    model = Model.build(tiny_config, seed=3)
    res = fit(model, *small_data, TrainConfig(lr=1e-3, max_epochs=4, batch_size=2))
    x, y = as_arrays(small_data[1])
    assert np.mean((model.predict(x) - y) ** 2) == pytest.approx(res.best_val_loss, rel=1e-12)


def test_fit_empty_split(tiny_config, small_data):
    with pytest.raises(EmptySplit):
        fit(Model.build(tiny_config), small_data[0], [], TrainConfig(max_epochs=1))


def test_fit_non_finite_loss(tiny_config, small_data):
    x, y = as_arrays(small_data[0])
    y[1] = np.inf
    with pytest.raises(NonFiniteLoss) as err:
        fit(Model.build(tiny_config), (x, y), small_data[1], TrainConfig(max_epochs=2, batch_size=8))
    assert err.value.epoch == 1 and err.value.batch == 0


def test_finetune_zero_epochs_is_identity(tiny_config, small_data, tmp_path):
    from rrwave import model as M

    src = Model.build(tiny_config, seed=4)
    path = M.save(src, tmp_path / "a.rrwn", source_tag="A")
    res, model = finetune(path, *small_data, TrainConfig(max_epochs=0))
    loaded = M.load_checkpoint(path)
    for k, v in loaded.tensors.items():
        np.testing.assert_array_equal(res.best_checkpoint.tensors[k], v)
    assert res.best_checkpoint.meta["lineage"] == ["A"]


def test_finetune_continues_training(tiny_config, small_data):
    pre = fit(Model.build(tiny_config, seed=5), *small_data, TrainConfig(lr=1e-3, max_epochs=2, batch_size=2),
              source_tag="A")
    res, _ = finetune(pre.best_checkpoint, *small_data, TrainConfig(lr=1e-3, max_epochs=2, batch_size=2),
                      source_tag="B")
    assert math.isfinite(res.history[0].val_mse)
    assert res.best_checkpoint.meta["lineage"] == ["A"]
    assert res.best_checkpoint.meta["source_tag"] == "B"


def test_finetune_window_mismatch(tiny_config, small_data):
    ckpt = Model.build(tiny_config).to_checkpoint()
    with pytest.raises(ConfigMismatch):
        finetune(ckpt, *small_data, TrainConfig(max_epochs=0), expect_w=32)
