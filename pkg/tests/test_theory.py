import math
import warnings

import numpy as np
import pytest

from samlab.models import QuadraticLoss
from samlab.optimizer import OptimConfig, contraction_factors
from samlab.theory import (NOISELESS_NOTE, RangeConditionWarning, RankDeficientError, Spectrum,
                           check_condition_kernel, check_condition_linear, error_envelope,
                           fourth_moment_check, iteration_bound_linear, iteration_window_kernel,
                           kernel_error_curve, kernel_spectrum, mean_iterate, relu_error_curve,
                           relu_spectrum, sharpness, sharpness_gap_lower_bound, spectral_sharpness,
                           stochastic_error_difference, stochastic_sam_error)


def recursion_oracle(A, H, w_bar, w0, eta, rho, sigma, k_max, predict):
    """Exact mean and noise map by iterating matrices; no eigendecomposition.

    The iterate is ``mean_k + Q_k eps`` with ``Q_{k+1} = T Q_k + eta (I + rho H) A^T``.
    Returns per-k (bias^2, var) of ``predict @ w`` against ``predict @ w_bar``.
    """
    n, dim = A.shape
    T = np.eye(dim) - eta * H - eta * rho * H @ H
    drive = eta * (np.eye(dim) + rho * H)
    mean, Q = w0.astype(float).copy(), np.zeros((dim, n))
    out = []
    for k in range(k_max + 1):
        r = predict @ (mean - w_bar)
        P = predict @ Q
        out.append((r @ r / n, sigma ** 2 * np.sum(P * P) / n))
        mean = T @ mean + drive @ (H @ w_bar)
        Q = T @ Q + drive @ A.T
    return np.array(out)


def test_relu_curve_initial_values_and_toy():
    s = Spectrum([1.0], [1.0], 1, "relu")
    sam = relu_error_curve(s, OptimConfig(0.015, 1.0), 0.0, 3)
    gd = relu_error_curve(s, OptimConfig(0.015, 0.0), 0.0, 3)
    assert sam.error[0] == 1.0 and gd.error[0] == 1.0
    assert abs(sam.error[1] - 0.9409) <= 1e-12
    assert abs(gd.error[1] - 0.970225) <= 1e-12


def test_relu_variance_limit():
    s = Spectrum([2.0, 1.0, 0.0], [1.0, 1.0, 5.0], 4, "relu")
    c = relu_error_curve(s, OptimConfig(0.1, 0.5), 0.7, 2000)
    assert c.var[-1] == pytest.approx(0.49 * 2 / 4)
    assert np.all(c.var_minus == 0)
    # zero eigenvalue does not enter the bias
    assert c.bias_sq[0] == pytest.approx((2.0 + 1.0) / 4)


def test_relu_curve_matches_matrix_recursion():
    rng = np.random.default_rng(0)
    n, p = 7, 4
    A = rng.standard_normal((n, p))
    H = A.T @ A
    w_bar, w0 = rng.standard_normal(p), rng.standard_normal(p)
    eta = 0.3 / np.linalg.eigvalsh(H).max()
    rho = 0.4 / np.linalg.eigvalsh(H).max()
    s = relu_spectrum(A, w_bar, w0)
    curve = relu_error_curve(s, OptimConfig(eta, rho), 0.6, 40)
    oracle = recursion_oracle(A, H, w_bar, w0, eta, rho, 0.6, 40, A)
    assert np.allclose(curve.bias_sq, oracle[:, 0], rtol=1e-10, atol=1e-14)
    assert np.allclose(curve.var, oracle[:, 1], rtol=1e-10, atol=1e-14)


def test_kernel_curve_matches_matrix_recursion():
    rng = np.random.default_rng(1)
    n = 6
    B = rng.standard_normal((n, n))
    K = (B + B.T) / 2
    w_bar = rng.standard_normal(n)
    top = np.abs(np.linalg.eigvalsh(K)).max()
    eta, rho = 0.2 / top, 0.3 / top
    s = kernel_spectrum(K, w_bar)
    assert s.d.min() < 0 < s.d.max()
    curve = kernel_error_curve(s, OptimConfig(eta, rho), 0.5, 30)
    # kernel noise enters as g = -eps, i.e. A^T = I
    oracle = recursion_oracle(np.eye(n), K, w_bar, np.zeros(n), eta, rho, 0.5, 30, K)
    assert np.allclose(curve.bias_sq, oracle[:, 0], rtol=1e-9)
    assert np.allclose(curve.var, oracle[:, 1], rtol=1e-9, atol=1e-15)
    pos = curve.var_plus
    assert np.all(pos >= 0) and np.all(curve.var_minus >= 0)


def test_kernel_curve_rejects_zero_eigenvalue():
    with pytest.raises(RankDeficientError):
        kernel_error_curve(Spectrum([1.0, 0.0], [1.0, 1.0], 2, "kernel"), OptimConfig(0.1, 0.1), 0.1, 3)


def test_noisy_toy_factor_is_one():
    eta = 0.0045
    d2 = -0.0007 / eta
    m2 = contraction_factors(d2, eta, -1 / d2)
    assert m2 == pytest.approx(1.0, abs=1e-15)
    s = Spectrum([1.0, d2], [1.0, 1.0], 2, "kernel")
    gd = kernel_error_curve(s, OptimConfig(eta, 0.0), 0.0, 20000)
    assert gd.error[-1] > 1e6 * gd.error[0]
    assert np.all(np.diff(gd.error[-1000:]) > 0)


def test_overflow_reports_inf():
    s = Spectrum([1.0, -100.0], [1.0, 1.0], 2, "kernel")
    c = kernel_error_curve(s, OptimConfig(0.5, 0.0), 0.1, 2000)
    assert math.isinf(c.error[-1])
    assert not np.any(np.isnan(c.error))


def test_range_condition_warns_but_returns():
    s = Spectrum([1.0], [1.0], 1, "relu")
    with pytest.warns(RangeConditionWarning):
        c = relu_error_curve(s, OptimConfig(1.5, 0.0), 0.0, 3)
    assert c.warnings and len(c) == 4


def test_spectrum_validation():
    with pytest.raises(ValueError):
        Spectrum([1.0, 2.0], [1.0, 1.0], 2, "relu")
    with pytest.raises(ValueError):
        Spectrum([1.0], [1.0, 2.0], 2, "relu")
    with pytest.raises(ValueError):
        Spectrum([1.0], [1.0], 1, "other")
    assert Spectrum([2.0, 0.0, -1.0], [1, 1, 1], 3, "kernel").r == 1


def test_condition_linear_examples():
    s = Spectrum([1.0], [1.0], 1, "relu")
    rep = check_condition_linear(s, OptimConfig(0.1, 1.0))
    assert rep.feasible
    lo, hi = rep.c0_interval
    assert lo == pytest.approx(1.125) and hi == pytest.approx(1.265625)
    assert not check_condition_linear(s, OptimConfig(0.1, 0.0)).feasible
    # eta -> 0 with rho fixed: the interval collapses onto c0 = 1
    widths = []
    for eta in (1e-2, 1e-4, 1e-6):
        lo, hi = check_condition_linear(s, OptimConfig(eta, 1.0)).c0_interval
        widths.append(hi - 1.0)
    assert widths[0] > widths[1] > widths[2] and widths[2] < 1e-5
    # non-positive contraction factor
    assert not check_condition_linear(s, OptimConfig(0.9, 1.0)).feasible


def test_condition_kernel_examples():
    s = Spectrum([1.0, -1.0], [1.0, 1.0], 2, "kernel")
    bad = check_condition_kernel(s, OptimConfig(0.05, 0.05), 0.03)
    assert not bad.feasible and bad.epsilon_ok
    good = check_condition_kernel(s, OptimConfig(0.05, 1.0), 0.03)
    assert good.feasible
    assert not check_condition_kernel(s, OptimConfig(0.05, 1.0), 0.06).feasible
    with pytest.raises(ValueError):
        check_condition_kernel(Spectrum([1.0], [1.0], 1, "kernel"), OptimConfig(0.05, 1.0), 0.03)


def test_iteration_bound_examples():
    s = Spectrum([1.0], [1.0], 1, "relu")
    cfg = OptimConfig(0.1, 0.5)
    # SNR = signal / (r sigma^2) = 3
    b = iteration_bound_linear(s, cfg, 1.0, signal_norm_sq=3.0)
    assert b.value == pytest.approx(math.log(0.5) / math.log(0.85), rel=1e-12)
    assert b.value == pytest.approx(4.2650, abs=1e-4)
    assert iteration_bound_linear(s, cfg, 1.0, signal_norm_sq=1.0).value == 0.0
    assert iteration_bound_linear(s, cfg, 1.0, signal_norm_sq=0.5).value is None
    z = iteration_bound_linear(s, cfg, 0.0)
    assert z.value is None and z.note == NOISELESS_NOTE


def test_iteration_window_examples():
    s = Spectrum([1.0, -1.0], [1.0, 1.0], 2, "kernel")
    cfg = OptimConfig(0.05, 1.0)
    assert iteration_window_kernel(s, cfg, 1.0, 1.0).k_lower == pytest.approx(1.0)
    w = iteration_window_kernel(s, cfg, 1.0, 2 ** (1 / 20) - 1)
    assert w.k_lower == pytest.approx(20.0)
    # SNR = 2 / 1: upper bound below 20 -> empty window, not an error
    assert w.k_upper is not None and w.k_upper < w.k_lower and not w.nonempty


def test_sharpness_examples():
    loss = QuadraticLoss(np.eye(2), np.zeros(2), np.zeros(2))
    assert sharpness(loss, np.zeros(2), 1.0) == pytest.approx(0.5)
    loss = QuadraticLoss(np.diag([1.0, -1.0]), np.zeros(2), np.zeros(2))
    assert sharpness(loss, np.zeros(2), 1.0) == pytest.approx(0.5)


def test_spectral_sharpness_matches_dense():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((8, 3))
    w_bar, w0 = rng.standard_normal(3), rng.standard_normal(3)
    loss = QuadraticLoss(A.T @ A, np.zeros(3), w_bar)
    s = relu_spectrum(A, w_bar, w0)
    cfg = OptimConfig(0.02, 0.05)
    for k in (0, 1, 10):
        dense = sharpness(loss, mean_iterate(loss, w0, cfg, k), 0.1)
        assert spectral_sharpness(s, cfg, 0.1, k) == pytest.approx(dense, rel=1e-9)


def test_gap_bound_examples():
    s = Spectrum([1.0], [1.0], 1, "relu")
    assert sharpness_gap_lower_bound(s, OptimConfig(0.015, 1.0), 0.1, 1) == pytest.approx(0.0015)
    s2 = Spectrum([2.0, 0.5], [1.0, 1.0], 2, "relu")
    assert sharpness_gap_lower_bound(s2, OptimConfig(0.1, 0.3), 0.2, 0) == pytest.approx(0.04 * -1.5 / 2)


def test_stochastic_examples():
    cfg = OptimConfig(0.01, 0.5)
    expected = 0.93 ** 20 - 0.99 ** 20
    assert stochastic_error_difference(10, cfg, 10, 1.0) == pytest.approx(expected, rel=1e-12)
    assert stochastic_error_difference(10, cfg, 10, 1.0) == pytest.approx(-0.58367, abs=1e-5)
    assert stochastic_sam_error(10, cfg, 10, 1.0) == pytest.approx(0.93 ** 20)
    assert stochastic_error_difference(10, OptimConfig(0.01, 0.0), 10, 1.0) == 0.0
    assert stochastic_error_difference(10, cfg, 0, 1.0) == 0.0
    with pytest.raises(ValueError, match="0 < 1 - eta - eta rho"):
        stochastic_error_difference(10, OptimConfig(0.5, 1.0), 3, 1.0)
    with pytest.raises(ValueError, match="0 < 1 - eta - eta rho"):
        stochastic_error_difference(10, OptimConfig(1.0, 0.0), 3, 1.0)


def test_fourth_moment_one_dimensional():
    rep = fourth_moment_check(1, 200_000, 5)
    # E[x^4] = 3 with MC standard error sqrt(96 / 2e5) ~ 0.022
    assert abs(rep.estimate[0, 0] - 3.0) < 0.11


def test_envelope_value():
    s = Spectrum([1.0, -2.0], [1.0, 0.5], 2, "kernel")
    assert error_envelope(s, 0.5) == pytest.approx((1 + 1) / 2 + 1.0)


def test_orderings_small_grid():
    s = Spectrum([3.0, 1.0, 0.2], [1.0, -0.5, 2.0], 5, "relu")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for a in (0.05, 0.2):
            for b in (0.1, 0.5):
                cfg = OptimConfig(a / 3.0, b / 3.0)
                sam = relu_error_curve(s, cfg, 0.3, 200)
                gd = relu_error_curve(s, cfg.as_gd(), 0.3, 200)
                assert np.all(sam.bias_sq <= gd.bias_sq)
                assert np.all(sam.var >= gd.var)
