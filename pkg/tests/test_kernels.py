import math

import numpy as np
import pytest

from samlab.harness import exp_covariance
from samlab.kernels import (ExponentialKernel, GaussianKernel, LinearKernel, WeightedSumKernel,
                            cross_gram, eval_kernel, expand_features, feature_expand, gram,
                            kernel_from_dict, kernel_sam_step, indefinite_kernel, predict_h)
from samlab.numerics import sym_eig
from samlab.optimizer import OptimConfig


def test_kernel_values_by_hand():
    x, y = np.array([0.0, 0.0]), np.array([3.0, 4.0])
    assert eval_kernel(GaussianKernel(100.0), x, y) == pytest.approx(math.exp(-25 / 200))
    assert eval_kernel(ExponentialKernel(), x, y) == pytest.approx(math.exp(-5))
    assert eval_kernel(LinearKernel(), np.array([1.0, 2.0]), y) == 11.0
    k = indefinite_kernel()
    assert eval_kernel(k, x, y) == pytest.approx(math.exp(-0.125) - 0.8 * math.exp(-5))
    # at zero distance the indefinite kernel is 1 - 0.8
    assert eval_kernel(k, x, x) == pytest.approx(0.2)


def test_gram_matches_pairwise_evaluation():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((6, 3))
    for spec in (GaussianKernel(2.0), ExponentialKernel(1.5), LinearKernel(), indefinite_kernel()):
        K = gram(spec, X)
        direct = np.array([[eval_kernel(spec, a, b) for b in X] for a in X])
        assert np.allclose(K, direct, atol=1e-14)
        assert np.array_equal(K, K.T)
        assert np.allclose(cross_gram(spec, X[:2], X), direct[:2], atol=1e-14)


def test_indefinite_kernel_is_indefinite_on_the_experiment_design():
    rng = np.random.default_rng(3)
    chol = np.linalg.cholesky(exp_covariance(200))
    X = rng.standard_normal((50, 200)) @ chol.T
    d = sym_eig(gram(indefinite_kernel(), X)).eigenvalues
    assert d.min() < 0 < d.max()


def test_feature_expand_example():
    X = np.array([[2.0, 3.0]])
    out = expand_features(X, [(0, 1)])
    assert np.array_equal(out, [[2, 3, 4, 9, 8, 27, 6]])


def test_feature_expand_width_and_seed():
    X = np.random.default_rng(0).standard_normal((4, 200))
    a, pa = feature_expand(X, 400, 11)
    b, pb = feature_expand(X, 400, 11)
    assert a.shape == (4, 1000)
    assert np.array_equal(a, b) and np.array_equal(pa, pb)
    assert len({tuple(p) for p in pa}) == 400
    assert np.all(pa[:, 0] < pa[:, 1])
    with pytest.raises(ValueError):
        feature_expand(X[:, :3], 4, 0)


def test_kernel_sam_step_by_hand():
    K = np.array([[2.0, 0.0], [0.0, -1.0]])
    w = np.array([1.0, 1.0])
    y = np.array([1.0, 0.0])
    # r = Kw - y = (1, -1); (I + rho K) r = (1 + 2 rho, -1 + rho)
    out = kernel_sam_step(w, K, y, OptimConfig(0.1, 0.5))
    assert np.allclose(out, [1 - 0.1 * 2.0, 1 - 0.1 * (-0.5)])


def test_predict_h():
    X = np.array([[0.0], [1.0]])
    w = np.array([1.0, 2.0])
    spec = GaussianKernel(0.5)
    assert predict_h(w, X, spec, np.array([0.0])) == pytest.approx(1 + 2 * math.exp(-1))
    assert predict_h(w, X, spec, X).shape == (2,)


def test_kernel_dict_round_trip():
    for spec in (GaussianKernel(3.0), ExponentialKernel(2.0), LinearKernel(), indefinite_kernel()):
        assert kernel_from_dict(spec.to_dict()) == spec
    assert kernel_from_dict("indefinite") == indefinite_kernel()
    with pytest.raises(ValueError):
        kernel_from_dict({"type": "polynomial"})
    with pytest.raises(ValueError):
        WeightedSumKernel(())
