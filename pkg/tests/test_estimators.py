import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from samlab.estimators import KernelSAMRegressor, SAMRegressor, StochasticSAMRegressor
from samlab.kernels import GaussianKernel, cross_gram
from samlab.optimizer import OptimConfig, stochastic_sam_run


def data(n=30, p=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    return X, X @ rng.standard_normal(p)


def test_params_and_clone():
    est = SAMRegressor(eta=0.01, rho=0.0, n_iter=7)
    assert est.get_params() == {"eta": 0.01, "rho": 0.0, "n_iter": 7}
    assert clone(est).get_params() == est.get_params()
    assert set(KernelSAMRegressor().get_params()) == {"kernel", "eta", "rho", "n_iter"}
    assert StochasticSAMRegressor().set_params(n_epochs=3).n_epochs == 3


def test_fullbatch_fit_recovers_linear_target():
    X, y = data()
    est = SAMRegressor(n_iter=3000).fit(X, y)
    assert est.score(X, y) > 0.999
    assert est.rho_ == pytest.approx(est.eta_ / 6)
    assert est.coef_path_.shape == (3001, 4)
    assert len(list(est.staged_predict(X[:3]))) == 3001


def test_fullbatch_rho_zero_is_gradient_descent():
    X, y = data(10, 3)
    est = SAMRegressor(eta=0.01, rho=0.0, n_iter=20).fit(X, y)
    w = np.zeros(3)
    for _ in range(20):
        w = w - 0.01 * X.T @ (X @ w - y)
    assert np.allclose(est.coef_, w)


def test_stochastic_matches_engine_without_shuffle():
    X, y = data(12, 3)
    est = StochasticSAMRegressor(eta=0.02, rho=0.1, shuffle=False).fit(X, y)
    assert np.allclose(est.coef_, stochastic_sam_run(X, y, np.zeros(3), OptimConfig(0.02, 0.1, 12)))
    assert est.coef_path_.shape == (13, 3)
    a = StochasticSAMRegressor(random_state=3, n_epochs=2).fit(X, y).coef_
    b = StochasticSAMRegressor(random_state=3, n_epochs=2).fit(X, y).coef_
    assert np.array_equal(a, b)


def test_kernel_regressor_predicts_with_dual_coefficients():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((15, 2))
    y = np.sin(X[:, 0])
    spec = GaussianKernel(1.0)
    est = KernelSAMRegressor(kernel=spec, n_iter=200).fit(X, y)
    Xt = rng.standard_normal((4, 2))
    assert np.allclose(est.predict(Xt), cross_gram(spec, Xt, X) @ est.dual_coef_)
    assert est.coef_ is est.dual_coef_
    KernelSAMRegressor(kernel="indefinite", n_iter=5).fit(X, y)


def test_input_validation():
    X, y = data(5, 2)
    with pytest.raises(NotFittedError):
        SAMRegressor().predict(X)
    with pytest.raises(ValueError):
        SAMRegressor().fit(X, y[:3])
    with pytest.raises(ValueError):
        SAMRegressor(eta="huge").fit(X, y)
    with pytest.raises(ValueError):
        SAMRegressor(rho=-1.0).fit(X, y)
    with pytest.raises(ValueError):
        SAMRegressor().fit(np.zeros((5, 2)), y)
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        SAMRegressor().fit(bad, y)
    est = SAMRegressor(n_iter=2).fit(X, y)
    with pytest.raises(ValueError):
        est.predict(np.ones((2, 3)))
