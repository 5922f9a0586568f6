import json

import numpy as np
import pytest

from finer.net import (
    CheckpointError, Model, ShapeError, TrainConfig, TrainingError, build_model, cnn, conv1d, cross_entropy, dense,
    fit, forward, global_max_pool, input_gradient, load_checkpoint, loss_and_grads, mlp, predict_label,
    predict_proba, relu, save_checkpoint, sigmoid, sigmoid_head,
)

from conftest import random_models


def fd_input_grad(model, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (predict_proba(model, xp)[0] - predict_proba(model, xm)[0]) / (2 * eps)
    return g


def fd_param_grad(model, terms, i, key, eps=1e-6):
    g = np.zeros_like(model.params[i][key])
    for idx in np.ndindex(g.shape):
        orig = model.params[i][key][idx]
        model.params[i][key][idx] = orig + eps
        up = sum(w * cross_entropy(model, X, y) for X, y, w in terms if len(X))
        model.params[i][key][idx] = orig - eps
        down = sum(w * cross_entropy(model, X, y) for X, y, w in terms if len(X))
        model.params[i][key][idx] = orig
        g[idx] = (up - down) / (2 * eps)
    return g


@pytest.mark.parametrize("which", [0, 1])
def test_input_gradient_matches_finite_differences(which, rng):
    model = random_models(seed=7)[which]
    for _ in range(3):
        x = rng.standard_normal(model.input_shape)
        np.testing.assert_allclose(input_gradient(model, x), fd_input_grad(model, x), rtol=1e-4, atol=1e-9)


def test_batched_gradient_equals_single(rng):
    model = random_models()[0]
    X = rng.standard_normal((4,) + model.input_shape)
    G = input_gradient(model, X)
    for i in range(4):
        np.testing.assert_allclose(G[i], input_gradient(model, X[i]), atol=1e-14)


def test_param_gradients_match_finite_differences(rng):
    model = random_models(seed=3)[0]
    X = rng.standard_normal((5,) + model.input_shape)
    y = np.array([0, 1, 1, 0, 1.0])
    X2 = rng.standard_normal((3,) + model.input_shape)
    terms = [(X, y, 1.0), (X2, np.zeros(3), 0.5), (np.zeros((0,) + model.input_shape), np.zeros(0), 2.0)]
    total, per, grads = loss_and_grads(model, terms)
    assert per[2] == 0.0
    assert total == pytest.approx(per[0] + 0.5 * per[1])
    for i, p in enumerate(model.params):
        for key in p:
            np.testing.assert_allclose(grads[i][key], fd_param_grad(model, terms, i, key), rtol=1e-4, atol=1e-8)


def test_forward_trace_and_probabilities(rng):
    model = random_models()[0]
    x = rng.standard_normal(model.input_shape)
    tr = forward(model, x)
    assert len(tr.activations) == len(model.layers)
    assert tr.output == pytest.approx(predict_proba(model, x)[0])
    assert 0.0 <= tr.output <= 1.0
    assert predict_label(model, x) in (0, 1)


def test_sigmoid_is_stable():
    z = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    s = sigmoid(z)
    assert np.all(np.isfinite(s)) and s[2] == 0.5 and s[0] == 0.0 and s[-1] == 1.0


def test_shape_errors():
    with pytest.raises(ShapeError):
        build_model((10, 3), [dense(31, 1), sigmoid_head()], 0)
    with pytest.raises(ShapeError):
        build_model((10, 3), [dense(30, 1)], 0)
    with pytest.raises(ShapeError):
        build_model((2, 3), [conv1d(3, 4, 3), relu(), global_max_pool(), dense(4, 1), sigmoid_head()], 0)
    model = mlp(10, 3)
    with pytest.raises(ShapeError):
        predict_proba(model, np.zeros((9, 3)))


def test_fit_reduces_loss_and_is_deterministic(rng):
    X = rng.standard_normal((64, 10, 3))
    y = (X[:, :, 0].sum(axis=1) > 0).astype(float)
    cfg = TrainConfig(lr=0.1, batch_size=16, epochs=30, seed=4)
    m0 = mlp(10, 3, hidden=8, seed=2)
    a = fit(m0, X, y, cfg)
    b = fit(m0, X, y, cfg)
    assert cross_entropy(a, X, y) < cross_entropy(m0, X, y)
    for pa, pb in zip(a.params, b.params):
        for k in pa:
            assert np.array_equal(pa[k], pb[k])
    # the input model is untouched
    assert not np.array_equal(a.params[0]["W"], m0.params[0]["W"])


def test_frozen_layers_do_not_move(rng):
    X = rng.standard_normal((32, 10, 3))
    y = (X[:, 0, 0] > 0).astype(float)
    m = cnn(10, 3, channels=4, hidden=4, seed=1).freeze([True, False, False, False, False, False, False])
    out = fit(m, X, y, TrainConfig(lr=0.1, batch_size=8, epochs=3, seed=0))
    assert np.array_equal(out.params[0]["W"], m.params[0]["W"])
    assert not np.array_equal(out.params[3]["W"], m.params[3]["W"])
    all_frozen = m.freeze([True] * 7)
    same = fit(all_frozen, X, y, TrainConfig(epochs=2))
    for pa, pb in zip(same.params, all_frozen.params):
        for k in pa:
            assert np.array_equal(pa[k], pb[k])


def test_non_finite_loss_raises(rng):
    X = rng.standard_normal((8, 10, 3))
    X[3, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="epoch 0"):
        fit(mlp(10, 3), X, np.ones(8), TrainConfig(batch_size=8, epochs=1))


def test_train_config_validation():
    for bad in (dict(lr=0), dict(batch_size=0), dict(epochs=-1), dict(momentum=1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_checkpoint_round_trip(rng):
    model = cnn(10, 3, channels=4, hidden=4, seed=9).freeze([False, False, False, True, False, False, False])
    data = save_checkpoint(model)
    back = load_checkpoint(data)
    assert back.frozen == model.frozen and back.input_shape == model.input_shape
    x = rng.standard_normal((2, 10, 3))
    assert np.array_equal(predict_proba(back, x), predict_proba(model, x))
    assert save_checkpoint(back) == data


@pytest.mark.parametrize("mutate", [
    lambda d: b"not json",
    lambda d: json.dumps({"format": "other"}).encode(),
    lambda d: json.dumps({**json.loads(d), "version": 99}).encode(),
    lambda d: json.dumps({**json.loads(d), "layers": []}).encode(),
])
def test_checkpoint_rejects_bad_input(mutate):
    data = save_checkpoint(mlp(4, 2))
    with pytest.raises(CheckpointError):
        load_checkpoint(mutate(data))
