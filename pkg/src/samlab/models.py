"""Statistical problems and their reduction to a quadratic loss.

Three problems are supported: ordinary least squares, a one-hidden-layer
ReLU network with frozen activation pattern, and regression with a
(possibly indefinite) kernel in representer coordinates. Each reduces to a
``QuadraticLoss`` ``f(w) = 0.5 (w-a)^T H (w-a) + g^T (w-a)``:

* linear: ``H = X^T X``, ``g = -X^T eps``
* ReLU:   ``H = A^T A``, ``g = -A^T eps`` with ``A`` the pattern matrix at ``w0``
* kernel: ``H = K``,     ``g = -eps``

For the kernel problem the constant ``w_bar^T eps`` of the original
objective is dropped; gradients, iterates and sharpness differences do not
depend on it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .kernels import KernelSpec, gram
from .numerics import DimensionError, check_symmetric


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")


@dataclass(frozen=True)
class LinearModel:
    X: np.ndarray
    w_bar: np.ndarray
    w0: np.ndarray = None
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        w_bar = np.asarray(self.w_bar, dtype=float).ravel()
        w0 = np.zeros_like(w_bar) if self.w0 is None else np.asarray(self.w0, dtype=float).ravel()
        if X.shape[1] != w_bar.shape[0] or w0.shape != w_bar.shape:
            raise DimensionError("X, w_bar and w0 dimensions disagree")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "w_bar", w_bar)
        object.__setattr__(self, "w0", w0)

    @property
    def n(self):
        return self.X.shape[0]

    def predict(self, w):
        return self.X @ w


@dataclass(frozen=True)
class ReluNetModel:
    X: np.ndarray
    L: int
    w_bar: np.ndarray
    w0: np.ndarray = None
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        w_bar = np.asarray(self.w_bar, dtype=float).ravel()
        w0 = np.zeros_like(w_bar) if self.w0 is None else np.asarray(self.w0, dtype=float).ravel()
        if w_bar.shape[0] != X.shape[1] * self.L or w0.shape != w_bar.shape:
            raise DimensionError("weights must have length d * L")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "w_bar", w_bar)
        object.__setattr__(self, "w0", w0)

    @property
    def n(self):
        return self.X.shape[0]

    def realizable(self) -> bool:
        """Whether ``w_bar`` and ``w0`` share an activation pattern on ``X``."""
        return bool(np.array_equal(active_mask(self.w_bar, self.X, self.L),
                                   active_mask(self.w0, self.X, self.L)))

    def predict(self, w):
        return np.maximum(self.X @ _blocks(w, self.X.shape[1], self.L), 0.0).sum(axis=1)


@dataclass(frozen=True)
class KernelModel:
    X: np.ndarray
    kernel: KernelSpec
    w_bar: np.ndarray
    noise: NoiseModel = field(default_factory=NoiseModel)
    K: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        w_bar = np.asarray(self.w_bar, dtype=float).ravel()
        if w_bar.shape[0] != X.shape[0]:
            raise DimensionError("w_bar must have one coefficient per sample")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "w_bar", w_bar)
        K = gram(self.kernel, X) if self.K is None else check_symmetric(self.K, "K")
        object.__setattr__(self, "K", K)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def w0(self):
        return np.zeros(self.n)

    def predict(self, w):
        return self.K @ w


Model = Union[LinearModel, ReluNetModel, KernelModel]


@dataclass(frozen=True)
class Dataset:
    y_star: np.ndarray
    eps: np.ndarray
    y: np.ndarray
    seed: int = None


@dataclass(frozen=True)
class QuadraticLoss:
    """``f(w) = 0.5 (w - anchor)^T H (w - anchor) + g^T (w - anchor)``."""

    H: np.ndarray
    g: np.ndarray
    anchor: np.ndarray

    def __post_init__(self):
        H = check_symmetric(self.H, "H")
        g = np.asarray(self.g, dtype=float)
        anchor = np.asarray(self.anchor, dtype=float)
        # g may carry one column per noise draw, shape (dim, batch)
        if H.shape[0] != anchor.shape[0] or g.shape[0] != H.shape[0]:
            raise DimensionError("H, g and anchor dimensions disagree")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "anchor", anchor)

    @property
    def dim(self):
        return self.H.shape[0]

    def value(self, w):
        r = np.asarray(w, dtype=float) - self.anchor
        return 0.5 * r @ self.H @ r + self.g @ r

    def gradient(self, w):
        # works column-wise on a (dim, batch) array as well
        w = np.asarray(w, dtype=float)
        anchor, g = self.anchor, self.g
        if w.ndim == 2:
            anchor = anchor.reshape(-1, 1) if anchor.ndim == 1 else anchor
            g = g.reshape(-1, 1) if g.ndim == 1 else g
        return self.H @ (w - anchor) + g

    def mean(self):
        """The same loss with its noise-driven linear term averaged out."""
        return QuadraticLoss(self.H, np.zeros(self.dim), self.anchor)


def _blocks(w, d, L):
    w = np.asarray(w, dtype=float).ravel()
    if w.shape[0] != d * L:
        raise DimensionError(f"expected {d * L} weights, got {w.shape[0]}")
    return w.reshape(L, d).T


def active_mask(w, X, L) -> np.ndarray:
    """Boolean ``(n, L)`` array: neuron ``l`` fires on sample ``i``.

    A pre-activation of exactly zero counts as inactive.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return X @ _blocks(w, X.shape[1], L) > 0


def activation_pattern(w, X, L=None) -> np.ndarray:
    """Pattern matrix ``A`` whose row ``i`` is ``a(w; x_i)``.

    Block ``l`` of row ``i`` is ``x_i`` when ``x_i^T w^(l) > 0`` and zero
    otherwise. ``L`` defaults to ``len(w) // d``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    w = np.asarray(w, dtype=float).ravel()
    if L is None:
        if w.shape[0] % d:
            raise DimensionError("len(w) is not a multiple of the input dimension")
        L = w.shape[0] // d
    mask = active_mask(w, X, L)
    return (mask[:, :, None] * X[:, None, :]).reshape(n, L * d)


def relu_forward(w, x, L) -> float:
    x = np.asarray(x, dtype=float).ravel()
    return float(np.maximum(_blocks(w, x.shape[0], L).T @ x, 0.0).sum())


def noiseless_targets(model: Model) -> np.ndarray:
    return model.predict(model.w_bar)


def generate_dataset(model: Model, seed) -> Dataset:
    """Draw ``y = y* + eps`` with ``eps ~ N(0, sigma^2 I)`` from a seeded PCG64."""
    y_star = noiseless_targets(model)
    rng = np.random.default_rng(seed)
    eps = model.noise.sigma * rng.standard_normal(y_star.shape[0])
    return Dataset(y_star, eps, y_star + eps, seed)


def to_quadratic(model: Model, dataset: Dataset) -> QuadraticLoss:
    if isinstance(model, LinearModel):
        X = model.X
        return QuadraticLoss(X.T @ X, -X.T @ dataset.eps, model.w_bar)
    if isinstance(model, ReluNetModel):
        A = activation_pattern(model.w0, model.X, model.L)
        return QuadraticLoss(A.T @ A, -A.T @ dataset.eps, model.w_bar)
    if isinstance(model, KernelModel):
        return QuadraticLoss(model.K, -np.asarray(dataset.eps, dtype=float), model.w_bar)
    raise TypeError(f"unsupported model {type(model).__name__}")


def least_squares_loss(w, model: Model, dataset: Dataset) -> float:
    """``0.5 * sum_i (y_i - Phi(w; x_i))^2``."""
    r = dataset.y - model.predict(w)
    return 0.5 * float(r @ r)


def loss_gradient(model: Model, dataset: Dataset):
    """Gradient callable of the model's training objective.

    Linear and ReLU use the least-squares loss (the ReLU gradient uses the
    pattern at the evaluation point). The kernel problem uses the RKKS
    functional gradient in representer coordinates, ``K w - y``.
    """
    y = dataset.y
    if isinstance(model, LinearModel):
        X = model.X
        return lambda w: X.T @ (X @ w - y)
    if isinstance(model, ReluNetModel):
        X, L = model.X, model.L

        def grad(w):
            A = activation_pattern(w, X, L)
            return A.T @ (A @ w - y)

        return grad
    if isinstance(model, KernelModel):
        K = model.K
        return lambda w: K @ w - y
    raise TypeError(f"unsupported model {type(model).__name__}")


def empirical_error(w, model: Model, dataset: Dataset) -> float:
    """``(1/n) sum_i (y*_i - Phi(w; x_i))^2`` for one noise draw."""
    r = dataset.y_star - model.predict(w)
    return float(r @ r) / r.shape[0]


def random_unit_weights(rng, dim) -> np.ndarray:
    """I.i.d. Uniform[0, 1] coordinates rescaled to unit Euclidean norm."""
    w = rng.uniform(0.0, 1.0, size=dim)
    return w / np.linalg.norm(w)
