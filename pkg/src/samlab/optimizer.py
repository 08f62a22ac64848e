"""SAM and GD iterations.

All engines use the unnormalized SAM step

    w <- w - eta * grad f(w + rho * grad f(w)),

which is plain gradient descent when ``rho == 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .models import (KernelModel, LinearModel, QuadraticLoss, ReluNetModel,
                     active_mask, empirical_error, loss_gradient)
from .numerics import sym_eig

DIVERGENCE_GUARD = 1e12


class DivergenceError(ArithmeticError):
    def __init__(self, iteration, message="non-finite gradient"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class OptimConfig:
    eta: float
    rho: float = 0.0
    k_max: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not self.rho >= 0:
            raise ValueError("rho must be nonnegative")
        if int(self.k_max) != self.k_max or self.k_max < 0:
            raise ValueError("k_max must be a nonnegative integer")
        object.__setattr__(self, "k_max", int(self.k_max))

    def as_gd(self) -> "OptimConfig":
        return OptimConfig(self.eta, 0.0, self.k_max)


@dataclass
class Trajectory:
    iterates: np.ndarray
    errors: Optional[np.ndarray] = None
    diverged: bool = False
    diverged_at: Optional[int] = None
    pattern_break_at: Optional[int] = None
    guard: float = DIVERGENCE_GUARD
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.iterates)

    @property
    def final(self):
        return self.iterates[-1]


def sam_step_general(w, gradient: Callable, cfg: OptimConfig, iteration=None):
    """One SAM step using two gradient evaluations."""
    g = gradient(w)
    if not np.all(np.isfinite(g)):
        raise DivergenceError(iteration)
    if cfg.rho == 0:
        return w - cfg.eta * g
    g = gradient(w + cfg.rho * g)
    if not np.all(np.isfinite(g)):
        raise DivergenceError(iteration)
    return w - cfg.eta * g


def sam_step_quadratic(w, loss: QuadraticLoss, cfg: OptimConfig):
    """SAM step on a quadratic with two products by ``H`` (``H^2`` is never formed).

    Equal to ``(I - eta H - eta rho H^2) w + eta (I + rho H)(H anchor - g)``.
    ``w`` may be a ``(dim, batch)`` array, with ``loss.g`` either a vector or
    a matching ``(dim, batch)`` array.
    """
    r = loss.gradient(w)
    return w - cfg.eta * (r + cfg.rho * (loss.H @ r))


def contraction_factors(d, eta, rho):
    d = np.asarray(d, dtype=float)
    return 1.0 - eta * d - eta * rho * d * d


def _geometric_sums(m, x, k):
    """``sum_{i<k} m^i`` where ``x = 1 - m`` is passed separately for accuracy."""
    out = np.empty_like(m)
    for j, (mj, xj) in enumerate(zip(m, x)):
        if xj == 0.0:
            out[j] = k
        elif 0.0 < mj and abs(xj) < 0.5:
            out[j] = -math.expm1(k * math.log1p(-xj)) / xj
        else:
            with np.errstate(over="ignore"):
                out[j] = (1.0 - mj ** k) / xj
    return out


class ClosedForm:
    """Spectral evaluation of the SAM iterates on a fixed quadratic.

    One eigendecomposition of ``H`` serves every ``(w0, k)`` query. In the
    eigenbasis each coordinate evolves as ``c_k = m^k c_0 + eta (1 + rho d)
    S_k b`` with ``m = 1 - eta d - eta rho d^2``, ``b`` the coordinate of
    ``H anchor - g`` and ``S_k`` the geometric sum of ``m``; directions with
    ``m = 1`` accumulate ``S_k = k``.
    """

    def __init__(self, loss: QuadraticLoss, cfg: OptimConfig, eig=None):
        self.loss = loss
        self.cfg = cfg
        self.eig = eig if eig is not None else sym_eig(loss.H)
        d = self.eig.eigenvalues
        self.m = contraction_factors(d, cfg.eta, cfg.rho)
        # 1 - m computed directly so it is exactly zero for d = 0 or rho d = -1
        self.one_minus_m = cfg.eta * d * (1.0 + cfg.rho * d)
        U = self.eig.eigenvectors
        pull = loss.H @ loss.anchor
        rhs = pull[:, None] - loss.g if loss.g.ndim == 2 else pull - loss.g
        self.b = U.T @ rhs
        self.gain = cfg.eta * (1.0 + cfg.rho * d)

    def at(self, w0, k: int):
        U = self.eig.eigenvectors
        c0 = U.T @ np.asarray(w0, dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            mk = self.m ** k
            S = _geometric_sums(self.m, self.one_minus_m, k)
            coef = self.gain * S
            b = self.b
            if c0.ndim == 2 or b.ndim == 2:
                c0 = c0 if c0.ndim == 2 else c0[:, None]
                b = b if b.ndim == 2 else b[:, None]
                mk, coef = mk[:, None], coef[:, None]
            ck = mk * c0 + coef * b
        return U @ ck


def closed_form_iterate(loss: QuadraticLoss, w0, cfg: OptimConfig, k: int):
    """``w_k`` of SAM on ``loss`` from ``w0`` without iterating."""
    if k == 0:
        return np.array(w0, dtype=float)
    return ClosedForm(loss, cfg).at(w0, k)


def _default_error(problem, dataset):
    if isinstance(problem, (LinearModel, ReluNetModel, KernelModel)) and dataset is not None:
        return lambda w: empirical_error(w, problem, dataset)
    return None


def run_trajectory(problem, w0, cfg: OptimConfig, dataset=None, record_error=True,
                   error_fn=None, guard=DIVERGENCE_GUARD, keep_iterates=True) -> Trajectory:
    """Run ``cfg.k_max`` SAM steps from ``w0``.

    ``problem`` is a ``QuadraticLoss`` (exact quadratic step) or a model
    together with its ``dataset`` (general two-gradient step on the model's
    own objective). Errors default to ``empirical_error`` for models; for a
    bare quadratic pass ``error_fn``. The run stops early, flagged as
    diverged, once ``||w|| >= guard`` or a gradient turns non-finite.
    """
    if isinstance(problem, QuadraticLoss):
        step = lambda w, k: sam_step_quadratic(w, problem, cfg)  # noqa: E731
    else:
        if dataset is None:
            raise ValueError("a model needs its dataset")
        grad = loss_gradient(problem, dataset)
        step = lambda w, k: sam_step_general(w, grad, cfg, iteration=k)  # noqa: E731
    if error_fn is None and record_error:
        error_fn = _default_error(problem, dataset)
        if error_fn is None:
            raise ValueError("error_fn is required to record errors on a bare quadratic")
    w = np.array(w0, dtype=float)
    iterates = [w] if keep_iterates else None
    errors = [error_fn(w)] if record_error else None
    diverged_at = None
    for k in range(cfg.k_max):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                w = step(w, k)
        except DivergenceError:
            diverged_at = k + 1
            break
        norm = np.linalg.norm(w)
        if not np.isfinite(norm) or norm >= guard:
            diverged_at = k + 1
            break
        if keep_iterates:
            iterates.append(w)
        if record_error:
            errors.append(error_fn(w))
    traj = Trajectory(np.array(iterates) if keep_iterates else np.array([w]),
                      None if errors is None else np.array(errors),
                      diverged=diverged_at is not None, diverged_at=diverged_at, guard=guard)
    if isinstance(problem, ReluNetModel):
        traj.pattern_break_at = detect_pattern_break(problem, traj)
    return traj


def detect_pattern_break(model: ReluNetModel, trajectory) -> Optional[int]:
    """First iteration whose activation pattern differs from that of ``w0``."""
    iterates = trajectory.iterates if isinstance(trajectory, Trajectory) else trajectory
    ref = active_mask(model.w0, model.X, model.L)
    for k, w in enumerate(iterates):
        if not np.array_equal(active_mask(w, model.X, model.L), ref):
            return k
    return None


def stochastic_sam_run(X, y, w0, cfg: OptimConfig, record=None, guard=DIVERGENCE_GUARD):
    """Single-sample SAM over the rows of ``X`` in order (one step per row).

    The per-sample loss is ``0.5 (y_k - x_k^T w)^2``; its Hessian
    ``x_k x_k^T`` is applied as rank-one updates. Leading batch axes
    broadcast: ``X`` of shape ``(..., steps, p)``, ``y`` of shape
    ``(..., steps)``, ``w0`` of shape ``(..., p)`` run independent streams
    together. ``record(k, w)``, if given, is called after every step
    (``k = 0`` for ``w0``). Raises ``DivergenceError`` past the guard.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.array(np.broadcast_to(w0, X.shape[:-2] + X.shape[-1:]), dtype=float)
    eta, rho = cfg.eta, cfg.rho
    steps = X.shape[-2]
    if record is not None:
        record(0, w)
    for k in range(steps):
        x = X[..., k, :]
        r = np.einsum("...i,...i->...", x, w) - y[..., k]
        if rho:
            # gradient at the perturbed point w + rho * r * x
            r = r + rho * r * np.einsum("...i,...i->...", x, x)
        w = w - eta * r[..., None] * x
        if not np.all(np.isfinite(w)) or np.max(np.abs(w)) >= guard:
            raise DivergenceError(k + 1, "stochastic iterate left the divergence guard")
        if record is not None:
            record(k + 1, w)
    return w
