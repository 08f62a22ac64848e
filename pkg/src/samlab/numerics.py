"""Dense linear algebra used by the rest of the package.

Eigendecompositions and SVDs are delegated to LAPACK through numpy; this
module pins down the ordering, sign and rank conventions on top of it so
that downstream trajectories are reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SYMMETRY_RTOL = 1e-12
RANK_CUTOFF = 1e-10
BISECTION_TOL = 1e-12


class SymmetryError(ValueError):
    pass


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class SymEig:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        U = self.eigenvectors
        return (U * self.eigenvalues) @ U.T


@dataclass(frozen=True)
class ThinSvd:
    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray
    rank: int

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singular_values) @ self.right.T


def as_matrix(M, name="matrix") -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or 0 in M.shape:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    return M


def check_symmetric(M, name="matrix") -> np.ndarray:
    M = as_matrix(M, name)
    if M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")
    scale = max(np.abs(M).max(), 1.0)
    if np.abs(M - M.T).max() > SYMMETRY_RTOL * scale:
        raise SymmetryError(f"{name} is not symmetric")
    return M


def _fix_signs(V: np.ndarray) -> np.ndarray:
    # first coordinate that is nonzero (relative to the column) made positive
    V = V.copy()
    for j in range(V.shape[1]):
        col = V[:, j]
        big = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())
        if big.size and col[big[0]] < 0:
            V[:, j] = -col
    return V


def sym_eig(M) -> SymEig:
    """Symmetric eigendecomposition with descending eigenvalues.

    Ties keep LAPACK's (ascending) index order reversed stably, and each
    eigenvector is signed so its first nonzero coordinate is positive.
    """
    M = check_symmetric(M)
    M = 0.5 * (M + M.T)
    d, U = np.linalg.eigh(M)
    order = np.argsort(-d, kind="stable")
    return SymEig(d[order], _fix_signs(U[:, order]))


def thin_svd(A) -> ThinSvd:
    """Thin SVD ``A = V diag(s) U^T`` with numerical rank.

    Singular values at or below ``RANK_CUTOFF * s_max`` count as zero; the
    returned factors are truncated to the numerical rank.
    """
    A = as_matrix(A)
    V, s, Ut = np.linalg.svd(A, full_matrices=False)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > RANK_CUTOFF * smax)) if smax > 0 else 0
    U = _fix_signs(Ut.T[:, :rank])
    # keep V consistent with the flipped right vectors
    V = A @ U / s[:rank] if rank else V[:, :0]
    return ThinSvd(V, s[:rank].copy(), U, rank)


def ball_quadratic_max(H, g, radius: float) -> float:
    """Exact maximum of ``0.5 e^T H e + g^T e`` over ``||e|| <= radius``.

    Works in the eigenbasis of ``H``. The multiplier ``lam >= max(0, d_1)``
    solving ``||(lam I - H)^{-1} g|| = radius`` is located by bisection on
    ``log(lam - d_1)``, so roots just above ``d_1`` are resolved too; when
    ``g`` has no component along the top eigenspace (the hard case), the
    remaining norm budget is spent along a top eigenvector.
    """
    H = check_symmetric(H, "H")
    g = np.asarray(g, dtype=float).ravel()
    if g.shape[0] != H.shape[0]:
        raise DimensionError("g does not match H")
    if not radius > 0:
        raise ValueError("radius must be positive")
    eig = sym_eig(H)
    d = eig.eigenvalues
    gh = eig.eigenvectors.T @ g
    c = _ball_argmax_coords(d, gh, float(radius))
    return float(0.5 * np.dot(d * c, c) + np.dot(gh, c))


def ball_quadratic_max_diag(d, g, radius: float) -> float:
    """``ball_quadratic_max`` for ``H = diag(d)`` with ``d`` sorted descending."""
    d = np.asarray(d, dtype=float).ravel()
    g = np.asarray(g, dtype=float).ravel()
    if d.shape != g.shape:
        raise DimensionError("g does not match d")
    if np.any(np.diff(d) > 0):
        raise ValueError("d must be sorted in descending order")
    if not radius > 0:
        raise ValueError("radius must be positive")
    c = _ball_argmax_coords(d, g, float(radius))
    return float(0.5 * np.dot(d * c, c) + np.dot(g, c))


def _ball_argmax_coords(d, gh, R):
    # Stationarity: c = gh / (lam - d) with lam = d_1 + t, t >= max(0, -d_1).
    # Bisecting on log t keeps relative accuracy when the root hugs d_1,
    # which happens whenever gh is (numerically) almost orthogonal to the
    # top eigenspace.
    delta = d[0] - d
    t_min = max(0.0, -d[0])

    def coords(t):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return np.where(gh == 0, 0.0, gh / (t + delta))

    def norm(v):
        # scaled, so tiny or huge entries neither underflow nor overflow
        s = float(np.max(np.abs(v), initial=0.0))
        if s == 0.0 or not math.isfinite(s):
            return s
        return s * float(np.linalg.norm(v / s))

    if t_min > 0 and norm(coords(t_min)) <= R:
        return coords(t_min)  # H negative definite and interior maximiser
    lo = t_min if t_min > 0 else np.finfo(float).tiny
    hi = max(norm(gh) / R, lo) * 2.0
    if norm(coords(lo)) > R:
        for _ in range(2000):
            mid = math.sqrt(lo) * math.sqrt(hi)
            if not lo < mid < hi:
                break
            if norm(coords(mid)) > R:
                lo = mid
            else:
                hi = mid
            if hi <= lo * (1.0 + BISECTION_TOL):
                break
    else:
        hi = lo
    c = coords(hi)
    # the maximiser lies on the sphere: spend any slack along a top eigenvector
    left = R * R - np.dot(c, c)
    if left > 0:
        j = int(np.argmax(np.abs(gh) * (delta == 0)))
        c[j] = math.copysign(math.sqrt(c[j] ** 2 + left), gh[j] if gh[j] != 0 else 1.0)
    return c
