"""scikit-learn style wrappers around the SAM engines.

The estimators train by (stochastic) SAM on the least-squares loss and keep
the whole coefficient path, so ``staged_predict`` can replay early stopping.
``rho=0`` gives plain gradient descent.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .kernels import KernelSpec, cross_gram, gram, kernel_from_dict, kernel_sam_step
from .models import QuadraticLoss
from .numerics import sym_eig, thin_svd
from .optimizer import OptimConfig, run_trajectory, stochastic_sam_run


def _resolve(eta, rho, top):
    if isinstance(eta, str):
        if eta != "spectral":
            raise ValueError("eta must be a positive number or 'spectral'")
        if not top > 0:
            raise ValueError("spectral step size needs a nonzero data matrix")
        eta = 1.0 / (2.0 * top)
    if isinstance(rho, str):
        if rho != "eta/6":
            raise ValueError("rho must be a nonnegative number or 'eta/6'")
        rho = eta / 6.0
    cfg = OptimConfig(float(eta), float(rho))
    return cfg.eta, cfg.rho


class _PathMixin:
    def _check_X(self, X):
        check_is_fitted(self)
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict(self, X):
        return self._design(self._check_X(X)) @ self.coef_

    def staged_predict(self, X):
        """Predictions after each iteration, starting from the initial point."""
        D = self._design(self._check_X(X))
        for w in self.coef_path_:
            yield D @ w

    def _design(self, X):
        return X


class SAMRegressor(_PathMixin, RegressorMixin, BaseEstimator):
    """Full-batch SAM on ``0.5 ||y - X w||^2`` from ``w = 0``.

    Parameters
    ----------
    eta : float or 'spectral'
        Step size; ``'spectral'`` uses ``1 / (2 sigma_max(X)^2)``.
    rho : float or 'eta/6'
        Perturbation radius; ``0`` is gradient descent.
    n_iter : int
        Number of SAM steps.
    """

    def __init__(self, eta="spectral", rho="eta/6", n_iter=500):
        self.eta = eta
        self.rho = rho
        self.n_iter = n_iter

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        top = thin_svd(X).singular_values[0] ** 2 if np.any(X) else 0.0
        self.eta_, self.rho_ = _resolve(self.eta, self.rho, top)
        cfg = OptimConfig(self.eta_, self.rho_, self.n_iter)
        p = X.shape[1]
        loss = QuadraticLoss(X.T @ X, -X.T @ y, np.zeros(p))
        traj = run_trajectory(loss, np.zeros(p), cfg, record_error=False)
        self.coef_path_ = traj.iterates
        self.coef_ = traj.final
        self.diverged_ = traj.diverged
        self.n_features_in_ = p
        return self


class StochasticSAMRegressor(_PathMixin, RegressorMixin, BaseEstimator):
    """Single-sample SAM; each epoch visits the rows once in a shuffled order."""

    def __init__(self, eta="spectral", rho="eta/6", n_epochs=1, shuffle=True, random_state=None):
        self.eta = eta
        self.rho = rho
        self.n_epochs = n_epochs
        self.shuffle = shuffle
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        rng = check_random_state(self.random_state)
        top = thin_svd(X).singular_values[0] ** 2 if np.any(X) else 0.0
        self.eta_, self.rho_ = _resolve(self.eta, self.rho, top)
        n, p = X.shape
        path = [np.zeros(p)]
        w = np.zeros(p)
        for _ in range(self.n_epochs):
            order = rng.permutation(n) if self.shuffle else np.arange(n)

            def record(k, v):
                if k:
                    path.append(v.copy())

            w = stochastic_sam_run(X[order], y[order], w, OptimConfig(self.eta_, self.rho_, n),
                                   record=record)
        self.coef_path_ = np.array(path)
        self.coef_ = w
        self.n_features_in_ = p
        return self


class KernelSAMRegressor(_PathMixin, RegressorMixin, BaseEstimator):
    """KernelSAM in representer coordinates, ``h(x) = sum_j w_j K(x_j, x)``.

    ``kernel`` is a ``KernelSpec``, a config dict or a type name such as
    ``'indefinite'``. ``eta='spectral'`` uses ``1 / (2 max |eig(K)|)``.
    """

    def __init__(self, kernel="indefinite", eta="spectral", rho="eta/6", n_iter=1500):
        self.kernel = kernel
        self.eta = eta
        self.rho = rho
        self.n_iter = n_iter

    def _spec(self):
        return self.kernel if isinstance(self.kernel, KernelSpec) else kernel_from_dict(self.kernel)

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        spec = self._spec()
        K = gram(spec, X)
        top = float(np.abs(sym_eig(K).eigenvalues).max())
        self.eta_, self.rho_ = _resolve(self.eta, self.rho, top)
        cfg = OptimConfig(self.eta_, self.rho_, self.n_iter)
        w = np.zeros(X.shape[0])
        path = [w]
        for _ in range(self.n_iter):
            w = kernel_sam_step(w, K, y, cfg)
            path.append(w)
        self.kernel_spec_ = spec
        self.X_fit_ = X
        self.dual_coef_ = w
        self.coef_path_ = np.array(path)
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def coef_(self):
        return self.dual_coef_

    def _design(self, X):
        return cross_gram(self.kernel_spec_, X, self.X_fit_)
