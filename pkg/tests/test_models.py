import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcsgd.models import MLP, LogisticRegression, build_model, log_softmax

from oracles import central_diff_grad, softmax_xent

# denominator floor keeps coordinates with near-zero gradient from blowing up
REL_FLOOR = 1e-3


def rel_error(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)


def random_instance(kind, seed):
    rng = np.random.default_rng(seed)
    D, K = int(rng.integers(1, 8)), int(rng.integers(2, 5))
    model = build_model(kind, D, K, n_hidden=int(rng.integers(1, 6)))
    theta = rng.normal(0, 1, model.dim)
    return model, theta, rng.normal(0, 2, D), int(rng.integers(K))


def test_uniform_logits_give_log_k():
    for K in (2, 3, 10):
        m = LogisticRegression(4, K)
        assert m.loss(np.zeros(m.dim), np.ones(4), K - 1) == pytest.approx(math.log(K), rel=1e-15)


def test_zero_weight_binary_logreg():
    m = LogisticRegression(3, 2)
    assert m.loss(np.zeros(m.dim), [1.0, -2.0, 0.5], 0) == pytest.approx(0.6931471805599453, rel=1e-15)


@pytest.mark.parametrize("kind", ["logreg", "mlp"])
def test_loss_matches_brute_force(kind):
    for seed in range(50):
        model, theta, x, y = random_instance(kind, seed)
        z = model.logits(theta, x[None, :])[0].tolist()
        assert abs(model.loss(theta, x, y) - softmax_xent(z, y)) <= 1e-12


def test_log_softmax_survives_huge_logits():
    out = log_softmax(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.all(np.isfinite(out))
    assert out[0, 0] == 0.0


@pytest.mark.parametrize("kind", ["logreg", "mlp"])
def test_gradient_matches_finite_differences(kind):
    worst = 0.0
    for seed in range(100):
        model, theta, x, y = random_instance(kind, seed)
        g = model.per_example_gradient(theta, x, y)
        fd = central_diff_grad(lambda t: model.loss(t, x, y), theta, h=1e-5)
        worst = max(worst, rel_error(g, fd).max())
    assert worst < 1e-5


def test_logreg_closed_form():
    rng = np.random.default_rng(0)
    m = LogisticRegression(5, 3)
    theta = rng.normal(size=m.dim)
    x, y = rng.normal(size=5), 2
    W, b = theta[:15].reshape(3, 5), theta[15:]
    z = W @ x + b
    p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    resid = p - np.eye(3)[y]
    expected = np.concatenate([np.outer(resid, x).ravel(), resid])
    assert np.allclose(m.per_example_gradient(theta, x, y), expected, rtol=1e-13, atol=1e-15)


def test_batched_rows_equal_single_calls():
    model = MLP(4, 3, 3)
    rng = np.random.default_rng(2)
    theta = model.init_params(rng)
    X, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
    losses, grads = model.per_example_grads(theta, X, y)
    for i in range(6):
        # BLAS may reassociate across batch sizes, so allow last-bit differences
        assert losses[i] == pytest.approx(model.loss(theta, X[i], y[i]), rel=1e-13)
        assert np.allclose(grads[i], model.per_example_gradient(theta, X[i], y[i]), rtol=1e-12, atol=1e-15)


def test_near_zero_gradient_at_minimum():
    # a huge margin on the correct class drives the single-example loss to its infimum
    m = LogisticRegression(2, 2)
    theta = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 40.0])
    assert np.linalg.norm(m.per_example_gradient(theta, [0.3, -0.2], 1)) < 1e-15


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["logreg", "mlp"]))
def test_descent_direction(seed, kind):
    model, theta, x, y = random_instance(kind, seed)
    g = model.per_example_gradient(theta, x, y)
    if np.linalg.norm(g) < 1e-6:
        return
    step = 1e-4 / max(1.0, np.linalg.norm(g))
    assert model.loss(theta - step * g, x, y) < model.loss(theta, x, y)


def test_shape_errors():
    m = LogisticRegression(3, 2)
    with pytest.raises(ValueError):
        m.loss(np.zeros(m.dim), [1.0, 2.0], 0)
    with pytest.raises(ValueError):
        m.loss(np.zeros(m.dim + 1), [1.0, 2.0, 3.0], 0)
    with pytest.raises(ValueError):
        m.loss(np.zeros(m.dim), [1.0, 2.0, 3.0], 2)
    with pytest.raises(ValueError):
        build_model("resnet", 3, 2)


def test_init_scale_and_determinism():
    m = MLP(16, 4, 3)
    a = m.init_params(np.random.default_rng(0))
    assert np.array_equal(a, m.init_params(np.random.default_rng(0)))
    W1 = m.unpack(a)[0]
    assert np.abs(W1).max() <= 0.25
    assert m.dim == 16 * 4 + 4 + 3 * 4 + 3
