"""Seeded experiment scenarios, trial execution and aggregation.

Every trial draws its data from ``default_rng(base_seed + trial_index)``;
validation data comes from the derived stream ``default_rng([seed, 1])``.
The same seed is reused at every noise level, so the noise vector scales
with ``sigma`` while the design and the target stay fixed (common random
numbers across the sigma grid). Results are collected by trial index, so
the worker count never changes the output.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .kernels import cross_gram, expand_features, draw_pairs, gram, kernel_sam_step, indefinite_kernel
from .models import QuadraticLoss, random_unit_weights
from .numerics import sym_eig, thin_svd
from .optimizer import OptimConfig, run_trajectory, stochastic_sam_run
from .theory import (Spectrum, check_condition_kernel, kernel_error_curve,
                     stochastic_error_difference)

SIM_SCENARIOS = ("linear_fullbatch", "linear_stochastic", "kernel_indefinite")
TOY_SCENARIOS = ("toy_noiseless", "toy_noisy")
SCENARIOS = SIM_SCENARIOS + TOY_SCENARIOS + ("region_sweep", "stochastic_mc")

DEFAULT_EPSILON = 2.0 ** (1.0 / 20.0) - 1.0
DEFAULT_VALIDATION = {"linear_fullbatch": 600, "linear_stochastic": 2000, "kernel_indefinite": 200}

# small spectral toys; any key may be overridden from the config
TOY_DEFAULTS = {
    "toy_noiseless": {"d": [1.0], "u": [1.0], "n": 1, "sigma": 0.0,
                      "eta": 0.015, "rho": 1.0, "k_max": 300},
    "toy_noisy": {"d": [1.0, -0.0007 / 0.0045], "u": [1.0, 1.0], "n": 2,
                  "sigma": math.sqrt(0.2), "eta": 0.0045, "rho": 0.0045 / 0.0007,
                  "k_max": 10000},
}


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _grid(spec, name):
    if isinstance(spec, dict):
        try:
            return np.linspace(float(spec["start"]), float(spec["stop"]), int(spec["num"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(name, "grid needs numeric start, stop and num") from exc
    if isinstance(spec, (list, tuple)) and spec:
        return np.array([float(v) for v in spec])
    raise ConfigError(name, "expected a non-empty list or {start, stop, num}")


@dataclass
class ExperimentConfig:
    scenario: str
    n: Optional[int] = None
    p: Optional[int] = None
    validation_count: Optional[int] = None
    sigmas: list = field(default_factory=list)
    eta: object = "spectral"
    rho: object = "eta/6"
    k_max: Optional[int] = None
    repetitions: int = 1
    base_seed: int = 0
    cov_decay: float = 0.5
    pair_count: int = 400
    redraw_validation: bool = True
    epsilon: float = DEFAULT_EPSILON
    eta_grid: Optional[list] = None
    rho_grid: Optional[list] = None
    panels: list = field(default_factory=lambda: [[0.8, -0.6], [0.8, -1.0],
                                                  [0.95, -0.6], [0.95, -1.0]])
    toy: dict = field(default_factory=dict)
    sigma: float = 1.0

    REQUIRED = {
        "linear_fullbatch": ("n", "p", "sigmas", "k_max", "repetitions"),
        "linear_stochastic": ("n", "p", "sigmas", "repetitions"),
        "kernel_indefinite": ("n", "p", "sigmas", "k_max", "repetitions"),
        "region_sweep": ("eta_grid", "rho_grid"),
        "stochastic_mc": ("p", "eta", "rho", "k_max", "repetitions"),
        "toy_noiseless": (),
        "toy_noisy": (),
    }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be an object")
        if "scenario" not in raw:
            raise ConfigError("scenario", "missing required field")
        scenario = raw["scenario"]
        if scenario not in SCENARIOS:
            raise ConfigError("scenario", f"unknown scenario {scenario!r}")
        known = set(cls.__dataclass_fields__) - {"REQUIRED"}
        toy_keys = set(TOY_DEFAULTS["toy_noisy"])
        for key in raw:
            if key not in known and not (scenario in TOY_SCENARIOS and key in toy_keys):
                raise ConfigError(key, "unknown field")
        for key in cls.REQUIRED[scenario]:
            if key not in raw:
                raise ConfigError(key, "missing required field")
        cfg = cls(scenario=scenario)
        try:
            for key in ("n", "p", "validation_count", "k_max", "repetitions", "base_seed",
                        "pair_count"):
                if key in raw:
                    setattr(cfg, key, _as_int(raw[key], key))
            for key in ("cov_decay", "epsilon", "sigma"):
                if key in raw:
                    setattr(cfg, key, float(raw[key]))
            if "redraw_validation" in raw:
                cfg.redraw_validation = bool(raw["redraw_validation"])
            if "sigmas" in raw:
                cfg.sigmas = [float(s) for s in _grid(raw["sigmas"], "sigmas")]
            for key in ("eta", "rho"):
                if key in raw:
                    setattr(cfg, key, raw[key])
            for key in ("eta_grid", "rho_grid"):
                if key in raw:
                    setattr(cfg, key, [float(v) for v in _grid(raw[key], key)])
            if "panels" in raw:
                cfg.panels = [[float(a), float(b)] for a, b in raw["panels"]]
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, str(exc)) from exc
        if scenario in TOY_SCENARIOS:
            cfg.toy = {k: raw[k] for k in toy_keys if k in raw}
        cfg.validate()
        return cfg

    def validate(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions", "must be at least 1")
        if self.base_seed < 0:
            raise ConfigError("base_seed", "must be nonnegative")
        for key in ("n", "p"):
            v = getattr(self, key)
            if v is not None and v < 1:
                raise ConfigError(key, "must be positive")
        if self.k_max is not None and self.k_max < 0:
            raise ConfigError("k_max", "must be nonnegative")
        if any(s < 0 or not math.isfinite(s) for s in self.sigmas):
            raise ConfigError("sigmas", "noise levels must be finite and nonnegative")
        if self.scenario in SIM_SCENARIOS and not self.sigmas:
            raise ConfigError("sigmas", "needs at least one noise level")
        if self.eta != "spectral" and not _positive_number(self.eta):
            raise ConfigError("eta", "must be 'spectral' or a positive number")
        if self.rho != "eta/6" and not _nonneg_number(self.rho):
            raise ConfigError("rho", "must be 'eta/6' or a nonnegative number")
        if self.scenario == "stochastic_mc" and self.eta == "spectral":
            raise ConfigError("eta", "stochastic_mc needs a numeric step size")
        if self.scenario == "linear_stochastic":
            if self.k_max is not None and self.k_max != self.n:
                raise ConfigError("k_max", "the stochastic scenario runs exactly one epoch (k_max = n)")
            self.k_max = self.n
        if self.scenario == "kernel_indefinite" and self.pair_count > self.p * (self.p - 1) // 2:
            raise ConfigError("pair_count", "more pairs than distinct index pairs")
        if not 0 <= self.cov_decay < 1:
            raise ConfigError("cov_decay", "must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon", "must be positive")
        if self.validation_count is None:
            self.validation_count = DEFAULT_VALIDATION.get(self.scenario)
        elif self.validation_count < 1:
            raise ConfigError("validation_count", "must be positive")
        return self

    def to_dict(self):
        out = asdict(self)
        return {k: v for k, v in out.items() if v is not None}

    def toy_params(self) -> dict:
        params = dict(TOY_DEFAULTS[self.scenario])
        params.update(self.toy)
        return params


def _as_int(v, name):
    if isinstance(v, bool) or not float(v).is_integer():
        raise ConfigError(name, "must be an integer")
    return int(v)


def _positive_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0 and math.isfinite(v)


def _nonneg_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and v >= 0 and math.isfinite(v)


@dataclass
class TrialResult:
    trial: int
    seed: int
    sigma: float
    eta: float
    rho: float
    errors: dict
    best_error: dict
    best_iter: dict
    diverged: dict
    train_errors: Optional[dict] = None

    @classmethod
    def from_errors(cls, trial, seed, sigma, eta, rho, errors, diverged=None, train_errors=None):
        errors = {k: np.asarray(v, dtype=float) for k, v in errors.items()}
        best_error, best_iter = {}, {}
        for name, e in errors.items():
            # nan entries (after divergence) never win
            clean = np.where(np.isnan(e), np.inf, e)
            i = int(np.argmin(clean))
            best_iter[name] = i
            best_error[name] = float(clean[i])
        return cls(trial, seed, sigma, eta, rho, errors, best_error, best_iter,
                   diverged or {k: False for k in errors}, train_errors)

    @property
    def ratio(self):
        sam = self.best_error["sam"]
        return self.best_error["gd"] / sam if sam > 0 else math.inf

    @property
    def iter_gap(self):
        return self.best_iter["gd"] - self.best_iter["sam"]


@dataclass
class AggregateResult:
    scenario: str
    sigmas: list
    rows: list
    curves: dict
    trials: list
    warnings: list = field(default_factory=list)

    def row_for(self, sigma):
        for row in self.rows:
            if row["sigma"] == sigma:
                return row
        raise KeyError(sigma)


def _mean_std(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    mean = float(np.mean(v))
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return mean, std


def aggregate(trials, scenario="") -> AggregateResult:
    """Per-sigma summary of best errors and best iterations.

    Means use every trial at that sigma; standard deviations use the
    ``n - 1`` denominator and are 0 for a single trial. Trials are sorted by
    ``(sigma, trial)`` first, so the order they finished in is irrelevant.
    """
    if not trials:
        raise ValueError("aggregate needs at least one trial")
    trials = sorted(trials, key=lambda t: (t.sigma, t.trial))
    sigmas = sorted({t.sigma for t in trials})
    rows, curves, notes = [], {}, []
    for s in sigmas:
        group = [t for t in trials if t.sigma == s]
        row = {"sigma": s, "trials": len(group)}
        row["mean_ratio"], row["std_ratio"] = _mean_std([t.ratio for t in group])
        row["mean_iter_gap"], row["std_iter_gap"] = _mean_std([t.iter_gap for t in group])
        for name in ("sam", "gd"):
            row[f"mean_best_{name}"], row[f"std_best_{name}"] = _mean_std(
                [t.best_error[name] for t in group])
            row[f"mean_iter_{name}"], _ = _mean_std([t.best_iter[name] for t in group])
        row["diverged_gd"] = sum(t.diverged["gd"] for t in group)
        row["diverged_sam"] = sum(t.diverged["sam"] for t in group)
        rows.append(row)
        per = {}
        for name in ("gd", "sam"):
            stack = np.array([t.errors[name] for t in group])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                per[name] = (stack.mean(axis=0),
                             stack.std(axis=0, ddof=1) if len(group) > 1 else np.zeros(stack.shape[1]))
        curves[s] = per
        if row["diverged_gd"] or row["diverged_sam"]:
            notes.append(f"sigma={s}: divergence guard hit in "
                         f"{row['diverged_gd']} GD and {row['diverged_sam']} SAM trials")
    return AggregateResult(scenario, sigmas, rows, curves, trials, notes)


def exp_covariance(p, decay=0.5):
    idx = np.arange(p)
    return decay ** np.abs(idx[:, None] - idx[None, :])


def _gaussian_rows(rng, count, chol):
    return rng.standard_normal((count, chol.shape[0])) @ chol.T


def _validation_rng(cfg, seed):
    return np.random.default_rng([seed if cfg.redraw_validation else cfg.base_seed, 1])


def _step_sizes(cfg, top):
    eta = 1.0 / (2.0 * top) if cfg.eta == "spectral" else float(cfg.eta)
    rho = eta / 6.0 if cfg.rho == "eta/6" else float(cfg.rho)
    return eta, rho


def _linear_data(cfg, seed, sigma):
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(exp_covariance(cfg.p, cfg.cov_decay))
    X = _gaussian_rows(rng, cfg.n, chol)
    w_bar = random_unit_weights(rng, cfg.p)
    eps = sigma * rng.standard_normal(cfg.n)
    vrng = _validation_rng(cfg, seed)
    X_test = _gaussian_rows(vrng, cfg.validation_count, chol)
    return rng, X, w_bar, eps, X_test, X_test @ w_bar


def linear_fullbatch_trial(cfg: ExperimentConfig, trial: int, sigma: float) -> TrialResult:
    seed = cfg.base_seed + trial
    _, X, w_bar, eps, X_test, y_test = _linear_data(cfg, seed, sigma)
    eta, rho = _step_sizes(cfg, thin_svd(X).singular_values[0] ** 2)
    loss = QuadraticLoss(X.T @ X, -X.T @ eps, w_bar)
    m = y_test.shape[0]
    y_star = X @ w_bar
    errors, train, diverged = {}, {}, {}
    for name, r in (("gd", 0.0), ("sam", rho)):
        in_sample = []

        def val_error(w, in_sample=in_sample):
            # the noiseless in-sample error is what the theory orders at sigma = 0
            t = y_star - X @ w
            in_sample.append(float(t @ t) / cfg.n)
            res = y_test - X_test @ w
            return float(res @ res) / m

        traj = run_trajectory(loss, np.zeros(cfg.p), OptimConfig(eta, r, cfg.k_max),
                              error_fn=val_error, keep_iterates=False)
        errors[name] = _pad(traj.errors, cfg.k_max + 1)
        train[name] = _pad(in_sample, cfg.k_max + 1)
        diverged[name] = traj.diverged
    return TrialResult.from_errors(trial, seed, sigma, eta, rho, errors, diverged, train)


def _pad(errors, length):
    out = np.full(length, np.nan)
    out[:len(errors)] = errors
    return out


def linear_stochastic_trial(cfg: ExperimentConfig, trial: int, sigma: float) -> TrialResult:
    seed = cfg.base_seed + trial
    rng, X, w_bar, eps, X_test, y_test = _linear_data(cfg, seed, sigma)
    eta, rho = _step_sizes(cfg, thin_svd(X).singular_values[0] ** 2)
    order = rng.permutation(cfg.n)
    Xs, ys = X[order], (X @ w_bar + eps)[order]
    m = y_test.shape[0]
    errors = {}
    for name, r in (("gd", 0.0), ("sam", rho)):
        out = np.empty(cfg.n + 1)

        def record(k, w, out=out):
            res = y_test - X_test @ w
            out[k] = float(res @ res) / m

        stochastic_sam_run(Xs, ys, np.zeros(cfg.p), OptimConfig(eta, r, cfg.n), record=record)
        errors[name] = out
    return TrialResult.from_errors(trial, seed, sigma, eta, rho, errors)


def kernel_indefinite_trial(cfg: ExperimentConfig, trial: int, sigma: float) -> TrialResult:
    """Targets come from expanded features; training uses the indefinite kernel on raw inputs."""
    seed = cfg.base_seed + trial
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(exp_covariance(cfg.p, cfg.cov_decay))
    X = _gaussian_rows(rng, cfg.n, chol)
    pairs = draw_pairs(cfg.p, cfg.pair_count, rng)
    w_bar = random_unit_weights(rng, 3 * cfg.p + cfg.pair_count)
    y = expand_features(X, pairs) @ w_bar + sigma * rng.standard_normal(cfg.n)
    vrng = _validation_rng(cfg, seed)
    X_test = _gaussian_rows(vrng, cfg.validation_count, chol)
    y_test = expand_features(X_test, pairs) @ w_bar

    spec = indefinite_kernel()
    K = gram(spec, X)
    K_test = cross_gram(spec, X_test, X)
    eig = sym_eig(K).eigenvalues
    eta, rho = _step_sizes(cfg, np.abs(eig).max())
    m = y_test.shape[0]
    errors, diverged = {}, {}
    for name, r in (("gd", 0.0), ("sam", rho)):
        step_cfg = OptimConfig(eta, r, cfg.k_max)
        w = np.zeros(cfg.n)
        out = np.full(cfg.k_max + 1, np.nan)
        hit = False
        for k in range(cfg.k_max + 1):
            if k:
                w = kernel_sam_step(w, K, y, step_cfg)
                if not np.all(np.isfinite(w)) or np.linalg.norm(w) >= 1e12:
                    hit = True
                    break
            res = y_test - K_test @ w
            out[k] = float(res @ res) / m
        errors[name], diverged[name] = out, hit
    return TrialResult.from_errors(trial, seed, sigma, eta, rho, errors, diverged)


TRIAL_RUNNERS = {
    "linear_fullbatch": linear_fullbatch_trial,
    "linear_stochastic": linear_stochastic_trial,
    "kernel_indefinite": kernel_indefinite_trial,
}


def _run_unit(args):
    cfg, trial, sigma = args
    # single-threaded BLAS keeps every trial bit-identical across pool sizes
    with threadpool_limits(1):
        return TRIAL_RUNNERS[cfg.scenario](cfg, trial, sigma)


def run_trials(cfg: ExperimentConfig, workers: int = 1) -> list:
    units = [(cfg, t, s) for s in cfg.sigmas for t in range(cfg.repetitions)]
    if workers <= 1 or len(units) == 1:
        return [_run_unit(u) for u in units]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_unit, units, chunksize=1))


def run_scenario(cfg: ExperimentConfig, workers: int = 1) -> AggregateResult:
    if cfg.scenario not in SIM_SCENARIOS:
        raise ValueError(f"{cfg.scenario} is not a simulation scenario")
    return aggregate(run_trials(cfg, workers), cfg.scenario)


def run_linear_fullbatch(cfg, workers=1):
    return run_scenario(cfg, workers)


def run_linear_stochastic(cfg, workers=1):
    return run_scenario(cfg, workers)


def run_kernel_indefinite(cfg, workers=1):
    return run_scenario(cfg, workers)


def toy_spectrum(params) -> Spectrum:
    d = np.asarray(params["d"], dtype=float)
    order = np.argsort(-d, kind="stable")
    return Spectrum(d[order], np.asarray(params["u"], dtype=float)[order], int(params["n"]), "kernel")


def run_toy(cfg: ExperimentConfig):
    """Theory-only GD and SAM curves of a toy kernel spectrum."""
    params = cfg.toy_params()
    s = toy_spectrum(params)
    k_max = int(params["k_max"] if cfg.k_max is None else cfg.k_max)
    sigma = float(params["sigma"])
    gd = kernel_error_curve(s, OptimConfig(float(params["eta"]), 0.0), sigma, k_max, "gd")
    sam = kernel_error_curve(s, OptimConfig(float(params["eta"]), float(params["rho"])),
                             sigma, k_max, "sam")
    return gd, sam


def run_region_sweep(cfg: ExperimentConfig) -> list:
    """Feasibility of the kernel comparison condition on an (eta, rho) grid per panel.

    Each panel is ``(d_r, d_n)`` with spectrum ``(1, d_r, d_n)``. Returns
    ``[(d_r, d_n, rows)]`` where each row holds ``eta, rho, feasible, c0_lo, c0_hi``.
    """
    out = []
    for dr, dn in cfg.panels:
        s = Spectrum([1.0, dr, dn], [1.0, 1.0, 1.0], 3, "kernel")
        rows = []
        for eta in cfg.eta_grid:
            for rho in cfg.rho_grid:
                rep = check_condition_kernel(s, OptimConfig(eta, rho), cfg.epsilon)
                lo, hi = rep.c0_interval if rep.c0_interval is not None else (math.nan, math.nan)
                rows.append({"eta": eta, "rho": rho, "feasible": int(rep.feasible),
                             "c0_lo": lo, "c0_hi": hi})
        out.append((dr, dn, rows))
    return out


@dataclass
class StochasticMCReport:
    theory: float
    empirical: float
    standard_error: float
    err_sam: float
    err_gd: float
    streams: int

    @property
    def z(self):
        return (self.empirical - self.theory) / self.standard_error if self.standard_error > 0 else 0.0


def run_stochastic_mc(cfg: ExperimentConfig, chunk: int = 20000) -> StochasticMCReport:
    """Monte Carlo expected-trajectory error difference of single-sample SAM and SGD.

    GD and SAM share every stream. ``||mean_w - w_bar||^2`` is debiased by
    ``tr(cov)/N`` and its standard error comes from the delta method.
    """
    p, k, N = cfg.p, cfg.k_max, cfg.repetitions
    eta, rho = float(cfg.eta), float(cfg.rho)
    rng = np.random.default_rng(cfg.base_seed)
    w_bar = random_unit_weights(rng, p)
    finals = {"gd": np.empty((N, p)), "sam": np.empty((N, p))}
    done = 0
    while done < N:
        m = min(chunk, N - done)
        X = rng.standard_normal((m, k, p))
        y = X @ w_bar + cfg.sigma * rng.standard_normal((m, k))
        for name, r in (("gd", 0.0), ("sam", rho)):
            finals[name][done:done + m] = stochastic_sam_run(X, y, np.zeros(p), OptimConfig(eta, r, k))
        done += m
    err, lin = {}, {}
    for name, W in finals.items():
        mean = W.mean(axis=0)
        dev = mean - w_bar
        tr = float(np.sum(W.var(axis=0, ddof=1))) if N > 1 else 0.0
        err[name] = float(dev @ dev) - tr / N
        lin[name] = 2.0 * (W @ dev)
    z = lin["sam"] - lin["gd"]
    se = float(np.std(z, ddof=1) / math.sqrt(N)) if N > 1 else math.inf
    theory = stochastic_error_difference(p, OptimConfig(eta, rho), k, float(w_bar @ w_bar))
    return StochasticMCReport(theory, err["sam"] - err["gd"], se, err["sam"], err["gd"], N)
