from __future__ import annotations

import math

import numpy as np
import pytest
from oracles import finite_difference_errors, random_small_model

from fddms.can_codec import ContractError
from fddms.dataset import InstanceSet
from fddms.nn import (LstmDetector, Metrics, OptimizerState, StaleCacheError, bce_grad, bce_loss, bce_with_logits,
                      evaluate, load_checkpoint, optimizer_step, save_checkpoint, sigmoid, train)
from fddms.nn.training import confusion


def zero_model(n_features=3, hidden=2) -> LstmDetector:
    m = LstmDetector.create(n_features, hidden)
    for p in m.params.values():
        p[...] = 0.0
    return m


def test_zero_parameters_give_half():
    m = zero_model()
    X = np.random.default_rng(0).normal(size=(4, 6, 3))
    p, logit, _ = m.forward(X)
    np.testing.assert_array_equal(logit, 0.0)
    np.testing.assert_array_equal(p, 0.5)
    _, dX = m.logit_and_input_grad(X)
    np.testing.assert_array_equal(dX, 0.0)


def test_single_cell_closed_form():
    m = LstmDetector.create(1, 1)
    a = np.array([0.7, -0.4, 1.3, 0.9])  # input, forget, output, candidate
    m.params["Wx"][...] = a[None, :]
    m.params["Wh"][...] = 0.0
    m.params["b"][...] = 0.0
    m.params["w_out"][...] = 2.0
    m.params["b_out"][...] = -0.5
    x = 0.8
    i, o = 1 / (1 + math.exp(-a[0] * x)), 1 / (1 + math.exp(-a[2] * x))
    cand = math.tanh(a[3] * x)
    h = o * math.tanh(i * cand)
    p, logit, _ = m.forward(np.array([[x]]))
    assert logit == pytest.approx(2.0 * h - 0.5, abs=1e-15)
    assert p == pytest.approx(1 / (1 + math.exp(-(2.0 * h - 0.5))), abs=1e-15)


def test_batching_identity():
    m = LstmDetector.create(4, 5, seed=1)
    X = np.random.default_rng(1).normal(size=(6, 7, 4))
    batch = m.forward(X)[0]
    single = [m.forward(x)[0] for x in X]
    np.testing.assert_allclose(batch, single, rtol=0, atol=1e-15)


def test_forward_contracts():
    m = LstmDetector.create(4, 2)
    with pytest.raises(ContractError):
        m.forward(np.zeros((5, 3)))
    with pytest.raises(ContractError):
        m.forward(np.full((5, 4), np.nan))


def test_loss_examples():
    assert bce_loss(0.5, 1) == pytest.approx(math.log(2))
    assert bce_loss(0.5, 0) == pytest.approx(math.log(2))
    assert bce_loss(1 - 1e-9, 1) < 1e-8
    assert bce_with_logits(800.0, 1.0) == 0.0
    assert np.isfinite(bce_with_logits(-800.0, 1.0))


@pytest.mark.parametrize("z", [-30.0, -3.0, -0.2, 0.0, 0.7, 4.0, 30.0])
@pytest.mark.parametrize("y", [0.0, 1.0])
def test_bce_gradient_is_p_minus_y(z, y):
    h = 1e-6
    fd = (bce_with_logits(z + h, y) - bce_with_logits(z - h, y)) / (2 * h)
    g = float(bce_grad(z, y)[0])
    assert g == pytest.approx(float(sigmoid(z)) - y, abs=1e-15)
    assert g == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(42)
    for _ in range(5):
        model, X, y = random_small_model(rng)
        errors = finite_difference_errors(model, X, y)
        assert max(errors.values()) < 1e-4, errors


def test_stale_cache_is_rejected():
    m = LstmDetector.create(3, 2)
    X = np.zeros((1, 4, 3))
    _, _, cache = m.forward(X)
    grads, _ = m.backward(cache, [1.0])
    OptimizerState("sgd").step(m.params, grads)
    m.touch()
    with pytest.raises(StaleCacheError):
        m.backward(cache, [1.0])


def first_step(variant: str, g: float, **kw) -> float:
    params = {"w": np.array([1.0])}
    opt = OptimizerState(variant, **kw)
    optimizer_step(opt, params, {"w": np.array([g])})
    return 1.0 - float(params["w"][0])


@pytest.mark.parametrize("g", [0.3, -2.0, 1e-3])
def test_first_step_closed_forms(g):
    assert first_step("sgd", g, lr=0.1) == pytest.approx(0.1 * g)
    # bias-corrected moments equal g and g^2 on step one
    assert first_step("adam", g) == pytest.approx(1e-3 * g / (abs(g) + 1e-8))
    # squared average is 0.01 g^2 on step one
    assert first_step("rmsprop", g) == pytest.approx(1e-3 * g / (0.1 * abs(g) + 1e-8))
    assert first_step("adagrad", g) == pytest.approx(0.1 * g / (abs(g) + 1e-10))


@pytest.mark.parametrize("variant", ["sgd", "adam", "rmsprop", "adagrad"])
def test_zero_gradient_leaves_parameters(variant):
    params = {"w": np.array([1.0, -2.0])}
    opt = OptimizerState(variant)
    for _ in range(3):
        opt.step(params, {"w": np.zeros(2)})
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    assert opt.slots == {} or all(s.shape == (2,) for s in opt.slots.values())


def test_non_finite_gradient_skips_step():
    params = {"w": np.array([1.0])}
    opt = OptimizerState("adam")
    assert not opt.step(params, {"w": np.array([np.inf])})
    assert params["w"][0] == 1.0 and opt.skipped == 1 and opt.step_count == 0
    with pytest.raises(ValueError):
        OptimizerState("lbfgs")


def separable_set(n=40, W=20, F=4) -> InstanceSet:
    y = np.arange(n) % 2
    X = np.broadcast_to(y[:, None, None].astype(float), (n, W, F)).copy()
    return InstanceSet(X, y, np.arange(n), np.where(y == 1, 0, -1), tuple(f"f{i}" for i in range(F)))


def test_separable_set_is_learned():
    data = separable_set()
    m = LstmDetector.create(4, 8, seed=0)
    _, history = train(m, data, epochs=50, batch_size=8, opt=OptimizerState("adam"))
    assert history[-1].train_accuracy == 1.0
    assert all(h.loss <= history[0].loss for h in history[1:])
    assert evaluate(m, data).accuracy == 1.0


def test_zero_epochs_leave_model_unchanged():
    m = LstmDetector.create(4, 3)
    before = {k: v.copy() for k, v in m.params.items()}
    _, history = train(m, separable_set(), epochs=0)
    assert history == []
    for k in before:
        np.testing.assert_array_equal(before[k], m.params[k])


def test_metrics_examples():
    perfect = Metrics.from_counts(*confusion([1, 0, 1, 0], [1, 0, 1, 0]))
    assert (perfect.accuracy, perfect.precision, perfect.recall, perfect.f1) == (1.0, 1.0, 1.0, 1.0)
    allpos = Metrics.from_counts(*confusion([1, 0, 1, 0], [1, 1, 1, 1]))
    assert allpos.recall == 1.0 and allpos.accuracy == 0.5
    none = Metrics.from_counts(*confusion([0, 0], [0, 0]))
    assert set(none.undefined) == {"precision", "recall", "f1"}


def test_metrics_recompute_from_counts():
    rng = np.random.default_rng(3)
    y, pred = rng.integers(0, 2, 100), rng.integers(0, 2, 100)
    m = Metrics.from_counts(*confusion(y, pred))
    tp, fp, tn, fn = m.tp, m.fp, m.tn, m.fn
    assert tp + fp + tn + fn == 100
    assert m.accuracy == pytest.approx(np.mean(y == pred))
    assert m.precision == pytest.approx(tp / (tp + fp))
    assert m.recall == pytest.approx(tp / (tp + fn))
    assert m.f1 == pytest.approx(2 * tp / (2 * tp + fp + fn))


def test_checkpoint_round_trip(tmp_path, prepared):
    s = prepared.split
    m = LstmDetector.create(20, 4, seed=3, normalizer=s.normalizer, features=s.train.features)
    opt = OptimizerState("rmsprop")
    train(m, s.train.subset(np.arange(16)), epochs=1, opt=opt)
    save_checkpoint(tmp_path / "m.ckpt", m, opt, {"seed": 3})
    back, opt2, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"seed": 3} and back.features == m.features
    np.testing.assert_array_equal(back.predict_proba(s.test.X[:5]), m.predict_proba(s.test.X[:5]))
    np.testing.assert_array_equal(back.normalizer.std, s.normalizer.std)
    assert (opt2.variant, opt2.step_count) == ("rmsprop", opt.step_count)
    for k, v in opt.slots.items():
        np.testing.assert_array_equal(opt2.slots[k], v)
