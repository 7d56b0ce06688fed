"""MLP models: parameter views, loss, gradients, local SGD."""

import numpy as np
import pytest

from fedcomp import models
from fedcomp.models import Batch, ModelSpec, ParamVector

from conftest import central_fd, rel_err


# ---------------------------------------------------------------------------
# specs and parameter vectors

def test_param_count_mnist_mlp():
    assert ModelSpec((784, 64, 10)).n_params == 784 * 64 + 64 + 64 * 10 + 10  # 50,890


def test_param_count_minimal():
    assert ModelSpec((2, 2)).n_params == 6  # 2*2 weights + 2 biases


def test_spec_rejects_short_or_nonpositive():
    with pytest.raises(models.ModelError):
        ModelSpec((5,))
    with pytest.raises(models.ModelError):
        ModelSpec((5, 0, 3))


def test_flatten_unflatten_roundtrip():
    spec = ModelSpec((6, 5, 3))
    rng = np.random.default_rng(0)
    pv = ParamVector(rng.standard_normal(spec.n_params), spec)
    back = ParamVector.from_layers(pv.to_layers(), spec)
    np.testing.assert_array_equal(back.values, pv.values)


def test_init_params_deterministic():
    spec = ModelSpec((8, 4, 3))
    a = models.init_params(spec, seed=42)
    b = models.init_params(spec, seed=42)
    np.testing.assert_array_equal(a.values, b.values)
    c = models.init_params(spec, seed=43)
    assert not np.array_equal(a.values, c.values)


def test_init_params_glorot_bounds_and_zero_bias():
    spec = ModelSpec((10, 7, 2))
    pv = models.init_params(spec, seed=1)
    for (w, b), (fan_in, fan_out) in zip(pv.to_layers(), [(10, 7), (7, 2)]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        assert np.all(np.abs(w) <= a)
        np.testing.assert_array_equal(b, np.zeros(fan_out))


# ---------------------------------------------------------------------------
# loss

def test_loss_uniform_prediction_two_classes():
    # zero weights make logits uniform; CE vs a hard label is ln 2
    spec = ModelSpec((3, 2))
    pv = ParamVector.zeros(spec)
    batch = Batch(np.ones((4, 3)), np.array([0, 1, 0, 1]))
    assert models.loss(pv, batch) == pytest.approx(np.log(2.0), abs=1e-12)


def test_loss_equals_entropy_when_target_matches_prediction():
    # with zero weights the model predicts uniform; a uniform (zero-logit)
    # soft target then gives CE = entropy of uniform = ln C
    spec = ModelSpec((3, 4))
    pv = ParamVector.zeros(spec)
    batch = Batch(np.ones((2, 3)), np.zeros((2, 4)))
    assert models.loss(pv, batch) == pytest.approx(np.log(4.0), abs=1e-12)


def test_loss_single_linear_layer_hand_case():
    # 2 samples, 2 classes, identity-ish weights: hand-computed cross-entropy
    spec = ModelSpec((2, 2))
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([0.5, -0.5])
    pv = ParamVector.from_layers([(w, b)], spec)
    x = np.array([[1.0, 0.0], [0.0, 2.0]])
    y = np.array([0, 1])
    # logits: [1.5, -0.5] and [0.5, 1.5]
    z1, z2 = np.array([1.5, -0.5]), np.array([0.5, 1.5])
    expect = np.mean([
        -z1[0] + np.log(np.exp(z1).sum()),
        -z2[1] + np.log(np.exp(z2).sum()),
    ])
    assert models.loss(pv, Batch(x, y)) == pytest.approx(expect, abs=1e-12)


def test_loss_permutation_invariant():
    spec = ModelSpec((4, 3))
    rng = np.random.default_rng(5)
    pv = models.init_params(spec, 5)
    x = rng.uniform(0, 1, (6, 4))
    y = rng.integers(0, 3, 6)
    perm = rng.permutation(6)
    a = models.loss(pv, Batch(x, y))
    b = models.loss(pv, Batch(x[perm], y[perm]))
    assert a == pytest.approx(b, rel=1e-14)


def test_loss_shape_mismatch():
    spec = ModelSpec((4, 3))
    pv = ParamVector.zeros(spec)
    with pytest.raises(models.ModelError):
        models.loss(pv, Batch(np.ones((2, 5)), np.array([0, 1])))


# ---------------------------------------------------------------------------
# gradients

def test_gradient_zero_inputs_zero_first_layer():
    spec = ModelSpec((4, 3, 2))
    pv = ParamVector.zeros(spec)
    batch = Batch(np.zeros((3, 4)), np.array([0, 1, 0]))
    g = models.weight_gradient(pv, batch)
    (w0_grad, _), _ = g.to_layers()
    np.testing.assert_array_equal(w0_grad, np.zeros((4, 3)))


def test_gradient_duplicated_batch_unchanged():
    spec = ModelSpec((4, 3))
    rng = np.random.default_rng(9)
    pv = models.init_params(spec, 9)
    x = rng.uniform(0, 1, (3, 4))
    y = np.array([0, 2, 1])
    g1 = models.weight_gradient(pv, Batch(x, y))
    g2 = models.weight_gradient(pv, Batch(np.tile(x, (2, 1)), np.tile(y, 2)))
    np.testing.assert_allclose(g2.values, g1.values, rtol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_fd_small(seed):
    spec = ModelSpec((6, 5, 3))
    rng = np.random.default_rng(seed)
    pv = models.init_params(spec, seed)
    batch = Batch(rng.uniform(-1, 1, (4, 6)), rng.integers(0, 3, 4))
    g = models.weight_gradient(pv, batch)

    def f(values):
        return models.loss(ParamVector(values, spec), batch)

    fd = central_fd(f, pv.values.copy())
    assert rel_err(g.values, fd) < 1e-4


def test_gradient_matches_fd_soft_labels():
    spec = ModelSpec((5, 4, 3))
    rng = np.random.default_rng(17)
    pv = models.init_params(spec, 17)
    batch = Batch(rng.uniform(-1, 1, (2, 5)), rng.standard_normal((2, 3)))
    g = models.weight_gradient(pv, batch)

    def f(values):
        return models.loss(ParamVector(values, spec), batch)

    fd = central_fd(f, pv.values.copy())
    assert rel_err(g.values, fd) < 1e-4


# ---------------------------------------------------------------------------
# local SGD

def _toy_data(n=20, dim=4, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    return Batch(rng.uniform(0, 1, (n, dim)), rng.integers(0, classes, n))


def test_local_sgd_zero_lr_noop():
    spec = ModelSpec((4, 3))
    pv = models.init_params(spec, 2)
    out = models.local_sgd(pv, _toy_data(), 5, 0.0, 8, np.random.default_rng(0))
    np.testing.assert_array_equal(out.values, pv.values)


def test_local_sgd_single_fullbatch_step():
    spec = ModelSpec((4, 3))
    pv = models.init_params(spec, 2)
    data = _toy_data(n=10)
    out = models.local_sgd(pv, data, 1, 0.1, 10, np.random.default_rng(0))
    g = models.weight_gradient(pv, data)
    np.testing.assert_allclose(out.values, pv.values - 0.1 * g.values, rtol=1e-12)


def test_local_sgd_replays_manual_steps():
    spec = ModelSpec((4, 3))
    pv = models.init_params(spec, 2)
    data = _toy_data(n=20)
    k, lr, bs = 5, 0.05, 8
    out = models.local_sgd(pv, data, k, lr, bs, np.random.default_rng(123))

    # replay: same RNG stream gives the same permutation slices
    rng = np.random.default_rng(123)
    w = pv
    perm = rng.permutation(data.n)
    pos = 0
    for _ in range(k):
        if pos >= len(perm):
            perm = rng.permutation(data.n)
            pos = 0
        idx = perm[pos:pos + bs]
        pos += bs
        g = models.weight_gradient(w, Batch(data.inputs[idx], data.labels[idx]))
        w = ParamVector(w.values - lr * g.values, spec)
    np.testing.assert_array_equal(out.values, w.values)


def test_local_sgd_deterministic_per_seed():
    spec = ModelSpec((4, 3))
    pv = models.init_params(spec, 2)
    data = _toy_data()
    a = models.local_sgd(pv, data, 4, 0.1, 8, np.random.default_rng(7))
    b = models.local_sgd(pv, data, 4, 0.1, 8, np.random.default_rng(7))
    np.testing.assert_array_equal(a.values, b.values)


def test_local_sgd_empty_data_rejected():
    spec = ModelSpec((4, 3))
    pv = models.init_params(spec, 2)
    with pytest.raises(models.ModelError):
        models.local_sgd(pv, Batch(np.ones((1, 4)), np.array([0])), 0, 0.1, 2,
                         np.random.default_rng(0))
