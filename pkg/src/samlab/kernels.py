"""Symmetric kernels (PSD or indefinite), Gram matrices and KernelSAM.

Kernels are small frozen dataclasses so they can be written to and read
from configs. Indefinite kernels are built as weighted sums, e.g.
``indefinite_kernel()`` is ``exp(-||x-y||^2 / 200) - 0.8 exp(-||x-y||)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError


class KernelSpec:
    """Base class of the kernel variants."""

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class GaussianKernel(KernelSpec):
    """``exp(-||x - y||^2 / (2 * bandwidth_sq))``.

    ``bandwidth_sq`` is the variance, so ``bandwidth_sq=100`` divides the
    squared distance by 200.
    """

    bandwidth_sq: float = 1.0

    def __post_init__(self):
        if not self.bandwidth_sq > 0:
            raise ValueError("bandwidth_sq must be positive")

    def to_dict(self):
        return {"type": "gaussian", "bandwidth_sq": self.bandwidth_sq}


@dataclass(frozen=True)
class ExponentialKernel(KernelSpec):
    """``exp(-||x - y|| / scale)``."""

    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def to_dict(self):
        return {"type": "exponential", "scale": self.scale}


@dataclass(frozen=True)
class LinearKernel(KernelSpec):
    def to_dict(self):
        return {"type": "linear"}


@dataclass(frozen=True)
class WeightedSumKernel(KernelSpec):
    terms: tuple

    def __post_init__(self):
        terms = tuple((float(w), k) for w, k in self.terms)
        if not terms:
            raise ValueError("weighted sum needs at least one term")
        for w, k in terms:
            if not np.isfinite(w) or not isinstance(k, KernelSpec):
                raise ValueError("weighted sum terms must be (finite weight, KernelSpec)")
        object.__setattr__(self, "terms", terms)

    def to_dict(self):
        return {"type": "weighted_sum",
                "terms": [{"weight": w, "kernel": k.to_dict()} for w, k in self.terms]}


def indefinite_kernel() -> WeightedSumKernel:
    """Gaussian (variance 100) minus 0.8 times the exponential kernel."""
    return WeightedSumKernel(((1.0, GaussianKernel(100.0)), (-0.8, ExponentialKernel())))


def kernel_from_dict(d) -> KernelSpec:
    if isinstance(d, str):
        d = {"type": d}
    kind = d.get("type")
    if kind == "gaussian":
        return GaussianKernel(float(d.get("bandwidth_sq", 1.0)))
    if kind == "exponential":
        return ExponentialKernel(float(d.get("scale", 1.0)))
    if kind == "linear":
        return LinearKernel()
    if kind == "indefinite":
        return indefinite_kernel()
    if kind == "weighted_sum":
        return WeightedSumKernel(tuple((t["weight"], kernel_from_dict(t["kernel"]))
                                       for t in d["terms"]))
    raise ValueError(f"unknown kernel type {kind!r}")


def _from_sqdist(spec, sq, dot):
    if isinstance(spec, GaussianKernel):
        return np.exp(-sq / (2.0 * spec.bandwidth_sq))
    if isinstance(spec, ExponentialKernel):
        return np.exp(-np.sqrt(sq) / spec.scale)
    if isinstance(spec, LinearKernel):
        return dot()
    if isinstance(spec, WeightedSumKernel):
        out = 0.0
        for w, k in spec.terms:
            out = out + w * _from_sqdist(k, sq, dot)
        return out
    raise TypeError(f"unsupported kernel {type(spec).__name__}")


def eval_kernel(spec: KernelSpec, x, y) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise DimensionError("kernel arguments have different dimensions")
    diff = x - y
    return float(_from_sqdist(spec, np.dot(diff, diff), lambda: np.dot(x, y)))


def cross_gram(spec: KernelSpec, Xq, X) -> np.ndarray:
    """``[K(xq_i, x_j)]`` for query rows ``Xq`` against training rows ``X``."""
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if Xq.shape[1] != X.shape[1]:
        raise DimensionError("query and training dimensions differ")
    out = np.empty((Xq.shape[0], X.shape[0]))
    for i, xq in enumerate(Xq):
        diff = X - xq
        sq = np.einsum("ij,ij->i", diff, diff)
        out[i] = _from_sqdist(spec, sq, lambda: X @ xq)
    return out


def gram(spec: KernelSpec, X) -> np.ndarray:
    """Symmetric Gram matrix; each pair is evaluated once and mirrored."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    K = np.empty((n, n))
    for i in range(n):
        diff = X[i:] - X[i]
        sq = np.einsum("ij,ij->i", diff, diff)
        K[i, i:] = _from_sqdist(spec, sq, lambda: X[i:] @ X[i])
        K[i:, i] = K[i, i:]
    return K


def kernel_sam_step(w, K, y, cfg) -> np.ndarray:
    """One KernelSAM update in representer coordinates.

    ``w <- w - eta (I + rho K)(K w - y)``, evaluated with two products by
    ``K``. ``w`` and ``y`` may be ``(n, batch)`` arrays.
    """
    r = K @ w - y
    return w - cfg.eta * (r + cfg.rho * (K @ r))


def predict_h(w, X_train, spec: KernelSpec, x_query):
    """``h(x) = sum_j w_j K(x_j, x)``; a 2-D ``x_query`` gives one value per row."""
    w = np.asarray(w, dtype=float)
    Xq = np.asarray(x_query, dtype=float)
    single = Xq.ndim == 1
    Kq = cross_gram(spec, np.atleast_2d(Xq), X_train)
    if Kq.shape[1] != w.shape[0]:
        raise DimensionError("coefficient vector does not match the training set")
    out = Kq @ w
    return float(out[0]) if single else out


def draw_pairs(p, pair_count, rng) -> np.ndarray:
    """Draw ``pair_count`` distinct index pairs ``i < j`` uniformly (0-based)."""
    total = p * (p - 1) // 2
    if pair_count < 0 or pair_count > total:
        raise ValueError(f"pair_count must be in [0, {total}], got {pair_count}")
    i, j = np.triu_indices(p, k=1)
    chosen = rng.permutation(total)[:pair_count]
    return np.stack([i[chosen], j[chosen]], axis=1)


def expand_features(X, pairs) -> np.ndarray:
    """Append squares, cubes and the given pairwise products to ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    prods = X[:, pairs[:, 0]] * X[:, pairs[:, 1]]
    return np.hstack([X, X ** 2, X ** 3, prods])


def feature_expand(X, pair_count, seed):
    """Polynomial feature expansion with seeded random interaction pairs.

    Returns ``(X_expanded, pairs)`` so the same pairs can be applied to
    held-out data with ``expand_features``. Column order: the ``p`` originals,
    ``p`` squares, ``p`` cubes, then pair products in draw order.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pairs = draw_pairs(X.shape[1], pair_count, rng)
    return expand_features(X, pairs), pairs
