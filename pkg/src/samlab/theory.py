"""Closed-form error curves, comparison conditions and sharpness.

Everything here works on a ``Spectrum``: the eigenvalues ``d`` of the
curvature operator and the signal coordinates ``u`` in its eigenbasis. The
two flavors weigh the bias differently:

* ``relu`` (also covers least squares): bias term ``d_i u_i^2``, only the
  ``r`` positive eigenvalues enter, ``u = U_1^T (w_bar - w0)``;
* ``kernel``: bias term ``d_i^2 u_i^2``, all ``n`` eigenvalues enter,
  ``u = U^T w_bar``, and the variance splits by eigenvalue sign.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .models import QuadraticLoss
from .numerics import ball_quadratic_max, ball_quadratic_max_diag, sym_eig, thin_svd
from .optimizer import OptimConfig, closed_form_iterate, contraction_factors

ZERO_EIG_RTOL = 1e-12


class RangeConditionWarning(UserWarning):
    """Contraction factors leave (0, 1); the ReLU formulas are outside their proven regime."""


class RankDeficientError(ValueError):
    pass


@dataclass(frozen=True)
class Spectrum:
    d: np.ndarray
    u: np.ndarray
    n: int
    flavor: str

    def __post_init__(self):
        if self.flavor not in ("relu", "kernel"):
            raise ValueError(f"unknown spectrum flavor {self.flavor!r}")
        d = np.asarray(self.d, dtype=float).ravel()
        u = np.asarray(self.u, dtype=float).ravel()
        if d.shape != u.shape:
            raise ValueError("d and u must have the same length")
        if np.any(np.diff(d) > 0):
            raise ValueError("eigenvalues must be sorted in descending order")
        if self.n < 1:
            raise ValueError("n must be positive")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "u", u)

    @property
    def r(self) -> int:
        return int(np.sum(self.d > 0))

    @property
    def positive(self):
        return self.d > 0

    @property
    def negative(self):
        return self.d < 0

    def signal_norm_sq(self) -> float:
        """``||X(w_bar - w0)||^2`` (relu) or ``||K w_bar||^2`` (kernel)."""
        if self.flavor == "relu":
            pos = self.positive
            return float(np.sum(self.d[pos] * self.u[pos] ** 2))
        return float(np.sum(self.d ** 2 * self.u ** 2))

    def to_dict(self):
        return {"flavor": self.flavor, "n": self.n, "d": self.d.tolist(), "u": self.u.tolist()}


def relu_spectrum(A, w_bar, w0=None, n=None) -> Spectrum:
    """Spectrum of ``H = A^T A`` with ``u = U_1^T (w_bar - w0)``.

    Pass the pattern matrix (or ``X`` for least squares) as ``A``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    w_bar = np.asarray(w_bar, dtype=float)
    w0 = np.zeros_like(w_bar) if w0 is None else np.asarray(w0, dtype=float)
    svd = thin_svd(A)
    return Spectrum(svd.singular_values ** 2, svd.right.T @ (w_bar - w0),
                    A.shape[0] if n is None else n, "relu")


def kernel_spectrum(K, w_bar) -> Spectrum:
    eig = sym_eig(K)
    return Spectrum(eig.eigenvalues, eig.eigenvectors.T @ np.asarray(w_bar, dtype=float),
                    eig.eigenvalues.shape[0], "kernel")


@dataclass
class ErrorCurve:
    k: np.ndarray
    bias_sq: np.ndarray
    var_plus: np.ndarray
    var_minus: np.ndarray
    label: str = ""
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.var = self.var_plus + self.var_minus
        self.error = self.bias_sq + self.var

    def __len__(self):
        return len(self.k)

    def row(self, k):
        return {"k": int(self.k[k]), "bias_sq": float(self.bias_sq[k]),
                "var_plus": float(self.var_plus[k]), "var_minus": float(self.var_minus[k]),
                "error": float(self.error[k])}


def _powers(m, ks):
    # m^k for every (direction, k); overflow saturates to inf
    with np.errstate(over="ignore", invalid="ignore"):
        return np.power(m[:, None], ks[None, :])


def _weighted(weights, mk2):
    with np.errstate(invalid="ignore", over="ignore"):
        terms = np.where(weights[:, None] == 0, 0.0, weights[:, None] * mk2)
    return terms.sum(axis=0)


def _variance(mk, sigma, n):
    if mk.shape[0] == 0:
        return np.zeros(mk.shape[1])
    with np.errstate(over="ignore", invalid="ignore"):
        return sigma ** 2 / n * ((1.0 - mk) ** 2).sum(axis=0)


def relu_error_curve(s: Spectrum, cfg: OptimConfig, sigma: float, k_max: int,
                     label="") -> ErrorCurve:
    """Bias and variance of SAM (GD when ``rho = 0``) for the ReLU/linear model.

    ``bias^2(k) = (1/n) sum_i m_i^{2k} d_i u_i^2`` and
    ``var(k) = (sigma^2/n) sum_i (1 - m_i^k)^2`` over the positive eigenvalues,
    with ``m_i = 1 - eta d_i - eta rho d_i^2``. Factors outside ``(0, 1)``
    raise a ``RangeConditionWarning`` but the curve is still returned.
    """
    if s.flavor != "relu":
        raise ValueError("relu_error_curve needs a relu spectrum")
    pos = s.positive
    d, u = s.d[pos], s.u[pos]
    m = contraction_factors(d, cfg.eta, cfg.rho)
    notes = []
    if np.any(m <= 0) or np.any(m >= 1):
        msg = "contraction factors outside (0, 1): curve is outside the proven regime"
        warnings.warn(msg, RangeConditionWarning, stacklevel=2)
        notes.append(msg)
    ks = np.arange(k_max + 1)
    mk = _powers(m, ks)
    with np.errstate(over="ignore"):
        bias = _weighted(d * u ** 2, mk * mk) / s.n
    var = _variance(mk, sigma, s.n)
    return ErrorCurve(ks, bias, var, np.zeros_like(var), label, notes)


def kernel_error_curve(s: Spectrum, cfg: OptimConfig, sigma: float, k_max: int,
                       label="") -> ErrorCurve:
    """Bias and split variance of KernelSAM started from ``h_0 = 0``.

    ``bias^2(k) = (1/n) sum_i m_i^{2k} d_i^2 u_i^2``; ``var_plus`` and
    ``var_minus`` collect ``(sigma^2/n)(1 - m_i^k)^2`` over positive and
    negative eigenvalues. A zero eigenvalue is rejected.
    """
    if s.flavor != "kernel":
        raise ValueError("kernel_error_curve needs a kernel spectrum")
    scale = max(np.abs(s.d).max(), 1e-300)
    if np.any(np.abs(s.d) <= ZERO_EIG_RTOL * scale):
        raise RankDeficientError("kernel spectrum has a zero eigenvalue; full rank is required")
    m = contraction_factors(s.d, cfg.eta, cfg.rho)
    ks = np.arange(k_max + 1)
    mk = _powers(m, ks)
    with np.errstate(over="ignore"):
        bias = _weighted(s.d ** 2 * s.u ** 2, mk * mk) / s.n
    return ErrorCurve(ks, bias, _variance(mk[s.positive], sigma, s.n),
                      _variance(mk[s.negative], sigma, s.n), label)


def error_curve(s: Spectrum, cfg: OptimConfig, sigma: float, k_max: int, label=""):
    fn = relu_error_curve if s.flavor == "relu" else kernel_error_curve
    return fn(s, cfg, sigma, k_max, label)


def error_envelope(s: Spectrum, sigma: float) -> float:
    """Bound on the kernel SAM error when every ``|m_i| <= 1``: bias at ``k=0`` plus ``4 sigma^2``."""
    return float(np.sum(s.d ** 2 * s.u ** 2)) / s.n + 4.0 * sigma ** 2


@dataclass
class ConditionReport:
    feasible: bool
    c0_interval: Optional[tuple] = None
    epsilon_ok: Optional[bool] = None
    k_upper: Optional[float] = None
    k_lower: Optional[float] = None
    snr: Optional[float] = None
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {"feasible": self.feasible,
                "c0_interval": None if self.c0_interval is None else list(self.c0_interval),
                "epsilon_ok": self.epsilon_ok, "k_upper": self.k_upper,
                "k_lower": self.k_lower, "snr": self.snr, "notes": list(self.notes)}


def _c0_interval(d1, dr, cfg):
    """Admissible ``c0`` range from the two comparison inequalities, or a reason it is empty."""
    eta, rho = cfg.eta, cfg.rho
    m1 = 1.0 - eta * d1 - eta * rho * d1 ** 2
    mr = 1.0 - eta * dr - eta * rho * dr ** 2
    g1 = 1.0 - eta * d1
    if m1 <= 0 or mr <= 0 or g1 <= 0:
        return None, "a contraction factor is not positive"
    lo = (1.0 - eta * dr) / m1
    hi = (g1 / mr) ** 2
    if hi <= 1.0 or hi < lo:
        return (lo, hi), "no c0 > 1 satisfies both inequalities"
    return (lo, hi), None


def check_condition_linear(s: Spectrum, cfg: OptimConfig) -> ConditionReport:
    """Whether some ``c0 > 1`` satisfies ``1 - eta d_r <= c0 m_1`` and ``1 - eta d_1 >= sqrt(c0) m_r``.

    ``d_1`` and ``d_r`` are the largest and smallest positive eigenvalues.
    The admissible range ``[(1 - eta d_r)/m_1, ((1 - eta d_1)/m_r)^2]`` is
    reported even when it misses ``(1, inf)``.
    """
    pos = s.d[s.positive]
    if pos.size == 0:
        raise ValueError("spectrum has no positive eigenvalue")
    interval, why = _c0_interval(pos[0], pos[-1], cfg)
    return ConditionReport(why is None, interval, notes=[] if why is None else [why])


def check_condition_kernel(s: Spectrum, cfg: OptimConfig, epsilon: float) -> ConditionReport:
    """Linear-style ``c0`` condition on the positive part plus, for every
    negative eigenvalue, ``m_j <= 1`` and ``1 + epsilon <= 1 - eta d_j``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not np.any(s.negative) or not np.any(s.positive):
        raise ValueError("kernel condition needs both positive and negative eigenvalues; "
                         "use check_condition_linear for PSD spectra")
    report = check_condition_linear(s, cfg)
    dn = s.d[s.negative]
    m_neg = contraction_factors(dn, cfg.eta, cfg.rho)
    sam_ok = bool(np.all(m_neg <= 1.0))
    eps_ok = bool(np.all(1.0 + epsilon <= 1.0 - cfg.eta * dn))
    if not sam_ok:
        report.notes.append("SAM factor exceeds 1 on a negative eigenvalue")
    if not eps_ok:
        report.notes.append("1 + epsilon > 1 - eta d_j on a negative eigenvalue")
    report.feasible = report.feasible and sam_ok and eps_ok
    report.epsilon_ok = eps_ok
    report.k_lower = k_lower_kernel(epsilon)
    return report


@dataclass(frozen=True)
class IterationBound:
    value: Optional[float]
    snr: Optional[float]
    note: str = ""


NOISELESS_NOTE = "noiseless: SAM dominates for all k"
LOW_SNR_NOTE = "bound not asserted: SNR < 1"


def _upper_iteration_bound(d1, dr, cfg, sigma, signal_norm_sq, r):
    if sigma == 0:
        return IterationBound(None, math.inf, NOISELESS_NOTE)
    snr = signal_norm_sq / (r * sigma ** 2)
    if snr < 1:
        return IterationBound(None, snr, LOW_SNR_NOTE)
    m1 = 1.0 - cfg.eta * d1 - cfg.eta * cfg.rho * d1 ** 2
    mr = 1.0 - cfg.eta * dr - cfg.eta * cfg.rho * dr ** 2
    if m1 <= 0 or mr <= 0:
        return IterationBound(None, snr, "bound not asserted: contraction factor not positive")
    num = math.log(2.0 / (snr + 1.0))
    den = math.log(m1 ** 2 / mr)
    if num == 0:
        return IterationBound(0.0, snr)
    if den >= 0:
        return IterationBound(None, snr, "bound not asserted: m_1^2 >= m_r")
    return IterationBound(num / den, snr)


def iteration_bound_linear(s: Spectrum, cfg: OptimConfig, sigma: float,
                           signal_norm_sq: float = None) -> IterationBound:
    """Largest ``k`` for which the SAM-beats-GD guarantee applies.

    ``log[2/(SNR+1)] / log[m_1^2 / m_r]`` with
    ``SNR = ||X(w_bar - w0)||^2 / (r sigma^2)``; ``signal_norm_sq`` defaults
    to the spectrum's own ``sum d_i u_i^2``.
    """
    pos = s.d[s.positive]
    if signal_norm_sq is None:
        signal_norm_sq = s.signal_norm_sq()
    return _upper_iteration_bound(pos[0], pos[-1], cfg, sigma, signal_norm_sq, pos.size)


def k_lower_kernel(epsilon: float) -> float:
    return math.log(2.0) / math.log1p(epsilon)


@dataclass(frozen=True)
class KernelWindow:
    k_lower: float
    k_upper: Optional[float]
    nonempty: bool
    snr: Optional[float]
    note: str = ""


def iteration_window_kernel(s: Spectrum, cfg: OptimConfig, sigma: float, epsilon: float,
                            signal_norm_sq: float = None) -> KernelWindow:
    """``[log 2 / log(1 + epsilon), k_upper]`` with ``SNR = ||K w_bar||^2 / (r sigma^2)``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    pos = s.d[s.positive]
    if signal_norm_sq is None:
        signal_norm_sq = s.signal_norm_sq()
    upper = _upper_iteration_bound(pos[0], pos[-1], cfg, sigma, signal_norm_sq, pos.size)
    k_lo = k_lower_kernel(epsilon)
    if upper.note == NOISELESS_NOTE:
        return KernelWindow(k_lo, math.inf, True, upper.snr, upper.note)
    nonempty = upper.value is not None and upper.value >= k_lo
    return KernelWindow(k_lo, upper.value, nonempty, upper.snr, upper.note)


def mean_iterate(loss: QuadraticLoss, w0, cfg: OptimConfig, k: int):
    """Noise-averaged iterate: the closed form on the loss with ``g`` averaged out."""
    return closed_form_iterate(loss.mean(), w0, cfg, k)


def sharpness(loss: QuadraticLoss, w_mean, rho0: float) -> float:
    """Largest increase of the mean quadratic within ``rho0`` of ``w_mean``.

    ``max_{||e|| <= rho0} 0.5 e^T H e + e^T H (w_mean - anchor)``, solved exactly.
    """
    H = loss.H
    return ball_quadratic_max(H, H @ (np.asarray(w_mean, dtype=float) - loss.anchor), rho0)


def spectral_sharpness(s: Spectrum, cfg: OptimConfig, rho0: float, k: int) -> float:
    """``sharpness`` computed in the eigenbasis of the spectrum.

    The mean iterate sits at ``-m^k u`` relative to ``w_bar`` in eigen
    coordinates for both flavors, so only ``d`` and ``u`` are needed.
    """
    m = contraction_factors(s.d, cfg.eta, cfg.rho)
    with np.errstate(over="ignore", invalid="ignore"):
        offset = np.where(s.u == 0, 0.0, -(m ** k) * s.u)
        g = s.d * offset
    if not np.all(np.isfinite(g)):
        return math.inf
    return ball_quadratic_max_diag(s.d, g, rho0)


def sharpness_gap_lower_bound(s: Spectrum, cfg: OptimConfig, rho0: float, k: int) -> float:
    """Lower bound on ``kappa_GD(k) - kappa_SAM(k)`` for the ReLU model."""
    if s.flavor != "relu":
        raise ValueError("the sharpness gap bound is stated for relu spectra")
    pos = s.positive
    d, u = s.d[pos], s.u[pos]
    w = d ** 2 * u ** 2
    gd = np.sqrt(np.sum((1.0 - cfg.eta * d) ** (2 * k) * w))
    sam = np.sqrt(np.sum(contraction_factors(d, cfg.eta, cfg.rho) ** (2 * k) * w))
    return float(rho0 ** 2 * (d[-1] - d[0]) / 2.0 + rho0 * (gd - sam))


def _stochastic_factors(p, cfg):
    return 1.0 - cfg.eta - cfg.eta * cfg.rho * (p + 2), 1.0 - cfg.eta


def check_stochastic_precondition(p, cfg):
    sam, gd = _stochastic_factors(p, cfg)
    if not 0 < sam:
        raise ValueError(f"precondition 0 < 1 - eta - eta rho (p+2) fails ({sam:.6g})")
    if not sam <= gd:
        raise ValueError("precondition 1 - eta - eta rho (p+2) <= 1 - eta fails")
    if not gd < 1:
        raise ValueError("precondition 1 - eta < 1 fails")


def stochastic_sam_error(p, cfg: OptimConfig, k: int, w_bar_norm_sq: float) -> float:
    """``(1 - eta - eta rho (p+2))^{2k} ||w_bar||^2``, the noise floor excluded."""
    check_stochastic_precondition(p, cfg)
    return _stochastic_factors(p, cfg)[0] ** (2 * k) * w_bar_norm_sq


def stochastic_error_difference(p, cfg: OptimConfig, k: int, w_bar_norm_sq: float) -> float:
    """Error of single-sample SAM minus single-sample GD on isotropic Gaussian data."""
    check_stochastic_precondition(p, cfg)
    sam, gd = _stochastic_factors(p, cfg)
    return (sam ** (2 * k) - gd ** (2 * k)) * w_bar_norm_sq


@dataclass(frozen=True)
class FourthMomentReport:
    estimate: np.ndarray
    max_deviation: float
    diag_mean: float


def fourth_moment_check(p: int, sample_count: int, seed, chunk: int = 100_000) -> FourthMomentReport:
    """Monte Carlo estimate of ``E[x x^T x x^T]`` for ``x ~ N(0, I_p)`` against ``(p+2) I``."""
    rng = np.random.default_rng(seed)
    acc = np.zeros((p, p))
    done = 0
    while done < sample_count:
        m = min(chunk, sample_count - done)
        x = rng.standard_normal((m, p))
        sq = np.einsum("ij,ij->i", x, x)
        acc += (x * sq[:, None]).T @ x
        done += m
    est = acc / sample_count
    dev = np.abs(est - (p + 2) * np.eye(p))
    return FourthMomentReport(est, float(dev.max()), float(np.mean(np.diag(est))))
