import numpy as np
import pytest

from samlab.kernels import GaussianKernel
from samlab.models import (Dataset, DimensionError, KernelModel, LinearModel, NoiseModel,
                           QuadraticLoss, ReluNetModel, activation_pattern, active_mask,
                           empirical_error, generate_dataset, least_squares_loss, loss_gradient,
                           random_unit_weights, relu_forward, to_quadratic)


def numeric_grad(f, w, h=1e-6):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def test_activation_pattern_hand_example():
    # d = 2, L = 2: neuron 1 weights (1, 0), neuron 2 weights (0, -1)
    X = np.array([[1.0, 2.0], [-1.0, -3.0]])
    w = np.array([1.0, 0.0, 0.0, -1.0])
    A = activation_pattern(w, X)
    assert np.array_equal(A, [[1.0, 2.0, 0.0, 0.0], [0.0, 0.0, -1.0, -3.0]])
    # Phi(w; x) = a(w, x)^T w
    for i, x in enumerate(X):
        assert relu_forward(w, x, 2) == pytest.approx(A[i] @ w)


def test_zero_preactivation_counts_inactive():
    assert not active_mask(np.array([1.0, -1.0]), np.array([[1.0, 1.0]]), 1).any()


def test_quadratic_reduction_linear():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((6, 3))
    m = LinearModel(X, rng.standard_normal(3), noise=NoiseModel(0.3))
    ds = generate_dataset(m, 1)
    q = to_quadratic(m, ds)
    w = rng.standard_normal(3)
    # loss and quadratic differ by a constant, so gradients agree
    assert np.allclose(q.gradient(w), loss_gradient(m, ds)(w))
    assert np.allclose(q.gradient(w), numeric_grad(lambda v: least_squares_loss(v, m, ds), w), atol=1e-6)


def test_quadratic_reduction_relu_under_frozen_pattern():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((10, 2))
    w0 = rng.standard_normal(4)
    model = ReluNetModel(X, 2, w0 + 1e-3 * rng.standard_normal(4), w0, NoiseModel(0.1))
    assert model.realizable()
    ds = generate_dataset(model, 3)
    q = to_quadratic(model, ds)
    A = activation_pattern(w0, X, 2)
    assert np.allclose(A @ model.w_bar, ds.y_star)
    w = w0 + 1e-4 * rng.standard_normal(4)
    assert np.allclose(q.gradient(w), loss_gradient(model, ds)(w))


def test_quadratic_reduction_kernel():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((5, 2))
    model = KernelModel(X, GaussianKernel(1.0), rng.standard_normal(5), NoiseModel(0.5))
    ds = generate_dataset(model, 9)
    q = to_quadratic(model, ds)
    w = rng.standard_normal(5)
    assert np.allclose(q.gradient(w), model.K @ w - ds.y)


def test_generate_dataset_is_seeded():
    m = LinearModel(np.eye(3), np.ones(3), noise=NoiseModel(1.0))
    a, b = generate_dataset(m, 7), generate_dataset(m, 7)
    assert np.array_equal(a.eps, b.eps)
    assert not np.array_equal(a.eps, generate_dataset(m, 8).eps)
    assert np.array_equal(generate_dataset(LinearModel(np.eye(3), np.ones(3)), 7).eps, np.zeros(3))


def test_empirical_error_hand_value():
    m = LinearModel(np.eye(2), np.array([1.0, 2.0]))
    ds = Dataset(np.array([1.0, 2.0]), np.zeros(2), np.array([1.0, 2.0]))
    # residual (1, 2) at w = 0 -> (1 + 4) / 2
    assert empirical_error(np.zeros(2), m, ds) == 2.5


def test_quadratic_loss_batched_gradient():
    H = np.diag([1.0, 2.0])
    g = np.array([[1.0, 0.0], [0.0, 1.0]])
    q = QuadraticLoss(H, g, np.zeros(2))
    w = np.ones((2, 2))
    assert np.allclose(q.gradient(w), H @ w + g)
    assert np.allclose(q.mean().g, 0.0)


def test_dimension_checks():
    with pytest.raises(DimensionError):
        LinearModel(np.eye(2), np.ones(3))
    with pytest.raises(DimensionError):
        ReluNetModel(np.eye(2), 2, np.ones(3))
    with pytest.raises(ValueError):
        NoiseModel(-1.0)


def test_random_unit_weights():
    w = random_unit_weights(np.random.default_rng(0), 50)
    assert np.linalg.norm(w) == pytest.approx(1.0)
    assert np.all(w >= 0)
