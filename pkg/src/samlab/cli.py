"""``samlab`` command line: predict, simulate and check.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import warnings

import numpy as np

from . import __version__
from .harness import (SIM_SCENARIOS, TOY_SCENARIOS, ConfigError, ExperimentConfig,
                      run_stochastic_mc, run_region_sweep, run_scenario, run_toy)
from .kernels import kernel_from_dict, gram
from .models import activation_pattern
from .optimizer import OptimConfig
from .reporting import (build_manifest, json_safe, write_csv, write_curves, write_json_atomic,
                        write_svg)
from .theory import (RangeConditionWarning, Spectrum, check_condition_kernel,
                     check_condition_linear, error_curve, iteration_bound_linear,
                     iteration_window_kernel, kernel_spectrum, relu_spectrum,
                     sharpness_gap_lower_bound, spectral_sharpness,
                     stochastic_error_difference, stochastic_sam_error)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
AGGREGATE_COLUMNS = ["sigma", "mean_ratio", "std_ratio", "mean_iter_gap", "std_iter_gap",
                     "mean_best_sam", "std_best_sam", "mean_best_gd", "std_best_gd",
                     "mean_iter_sam", "mean_iter_gd", "diverged_gd", "diverged_sam"]


class RuntimeFailure(RuntimeError):
    pass


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    return raw


def _require(raw, key, where=""):
    if key not in raw:
        raise ConfigError(where + key, "missing required field")
    return raw[key]


def _number(raw, key, where="", default=None, positive=False):
    if key not in raw and default is not None:
        return default
    v = _require(raw, key, where)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(where + key, "must be a finite number")
    if positive and v <= 0:
        raise ConfigError(where + key, "must be positive")
    if v < 0:
        raise ConfigError(where + key, "must be nonnegative")
    return float(v)


def _vector(raw, key, where=""):
    v = _require(raw, key, where)
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(where + key, "must be a list of numbers") from exc
    if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
        raise ConfigError(where + key, "must be a non-empty list of finite numbers")
    return arr


def spectrum_from_config(raw) -> Spectrum:
    """Spectrum from explicit ``spectrum: {flavor, d, u, n}`` or from ``model``.

    ``model`` is an object (or a path to a JSON file holding one) with
    ``type`` linear, relu or kernel and the data the model needs.
    """
    if "spectrum" in raw:
        sp = raw["spectrum"]
        if not isinstance(sp, dict):
            raise ConfigError("spectrum", "must be an object")
        flavor = sp.get("flavor", "relu")
        if flavor not in ("relu", "kernel"):
            raise ConfigError("spectrum.flavor", "must be relu or kernel")
        d = _vector(sp, "d", "spectrum.")
        u = _vector(sp, "u", "spectrum.")
        if d.shape != u.shape:
            raise ConfigError("spectrum.u", "must have the same length as d")
        n = sp.get("n", d.size)
        if isinstance(n, bool) or not isinstance(n, int) or n < 1:
            raise ConfigError("spectrum.n", "must be a positive integer")
        order = np.argsort(-d, kind="stable")
        return Spectrum(d[order], u[order], n, flavor)
    if "model" in raw:
        model = raw["model"]
        if isinstance(model, str):
            model = load_config(model)
        if not isinstance(model, dict):
            raise ConfigError("model", "must be an object or a path")
        kind = _require(model, "type", "model.")
        X = np.atleast_2d(np.asarray(_require(model, "X", "model."), dtype=float))
        w_bar = _vector(model, "w_bar", "model.")
        try:
            if kind == "linear":
                w0 = _vector(model, "w0", "model.") if "w0" in model else None
                return relu_spectrum(X, w_bar, w0)
            if kind == "relu":
                L = int(_require(model, "L", "model."))
                w0 = _vector(model, "w0", "model.")
                return relu_spectrum(activation_pattern(w0, X, L), w_bar, w0)
            if kind == "kernel":
                K = gram(kernel_from_dict(_require(model, "kernel", "model.")), X)
                return kernel_spectrum(K, w_bar)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from exc
        raise ConfigError("model.type", f"unknown model type {kind!r}")
    raise ConfigError("spectrum", "missing required field (or give model)")


def _optim(raw, k_max=0):
    eta = _number(raw, "eta", positive=True)
    rho = _number(raw, "rho")
    try:
        return OptimConfig(eta, rho, k_max)
    except ValueError as exc:
        raise ConfigError("eta", str(exc)) from exc


def _k_max(raw):
    k = _require(raw, "k_max")
    if isinstance(k, bool) or not isinstance(k, int) or k < 0:
        raise ConfigError("k_max", "must be a nonnegative integer")
    return k


def cmd_predict(args, raw, out_dir, files, notes):
    s = spectrum_from_config(raw)
    k_max = _k_max(raw)
    cfg = _optim(raw, k_max)
    sigma = _number(raw, "sigma")
    rho0 = _number(raw, "rho0", positive=True) if "rho0" in raw else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RangeConditionWarning)
        curves = {"gd": error_curve(s, cfg.as_gd(), sigma, k_max, "gd"),
                  "sam": error_curve(s, cfg, sigma, k_max, "sam")}
    for w in caught:
        notes.append(f"range condition: {w.message}")
    files.append(write_curves(os.path.join(out_dir, "curve.csv"), curves))
    files.append(_curve_svg(os.path.join(out_dir, "curve.svg"), curves))
    summary = {"rows": k_max + 1, "final_error_gd": float(curves["gd"].error[-1]),
               "final_error_sam": float(curves["sam"].error[-1])}
    if rho0 is not None:
        rows = []
        for k in range(k_max + 1):
            kg = spectral_sharpness(s, cfg.as_gd(), rho0, k)
            ks = spectral_sharpness(s, cfg, rho0, k)
            bound = sharpness_gap_lower_bound(s, cfg, rho0, k) if s.flavor == "relu" else math.nan
            rows.append([k, kg, ks, bound])
        files.append(write_csv(os.path.join(out_dir, "sharpness.csv"),
                               ["k", "gd_kappa", "sam_kappa", "gap_lower_bound"], rows))
    return summary


def _curve_svg(path, curves, title="error"):
    return write_svg(path, {n: (c.k, c.error) for n, c in curves.items()}, title=title)


def cmd_simulate(args, raw, out_dir, files, notes):
    if args.seed is not None:
        raw = dict(raw, base_seed=args.seed)
    cfg = ExperimentConfig.from_dict(raw)
    summary = {"scenario": cfg.scenario}
    if cfg.scenario in TOY_SCENARIOS:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RangeConditionWarning)
            gd, sam = run_toy(cfg)
        curves = {"gd": gd, "sam": sam}
        files.append(write_curves(os.path.join(out_dir, "curve.csv"), curves))
        files.append(_curve_svg(os.path.join(out_dir, "curve.svg"), curves, cfg.scenario))
        summary["rows"] = len(gd)
    elif cfg.scenario == "region_sweep":
        feasible = 0
        for dr, dn, rows in run_region_sweep(cfg):
            name = f"region_dr{format(dr, 'g')}_dn{format(dn, 'g')}.csv"
            files.append(write_csv(os.path.join(out_dir, name),
                                   ["eta", "rho", "feasible", "c0_lo", "c0_hi"], rows))
            feasible += sum(r["feasible"] for r in rows)
        summary["feasible_cells"] = feasible
    elif cfg.scenario == "stochastic_mc":
        rep = run_stochastic_mc(cfg)
        files.append(write_csv(os.path.join(out_dir, "stochastic_mc.csv"),
                               ["theory", "empirical", "standard_error", "z", "err_sam", "err_gd",
                                "streams"],
                               [[rep.theory, rep.empirical, rep.standard_error, rep.z,
                                 rep.err_sam, rep.err_gd, rep.streams]]))
        summary.update(theory=rep.theory, empirical=rep.empirical, z=rep.z)
    else:
        agg = run_scenario(cfg, workers=args.workers)
        notes.extend(agg.warnings)
        files.append(write_csv(os.path.join(out_dir, "aggregate.csv"), AGGREGATE_COLUMNS, agg.rows))
        traj = []
        for s in agg.sigmas:
            (mg, sg), (ms, ss) = agg.curves[s]["gd"], agg.curves[s]["sam"]
            traj += [[s, k, mg[k], sg[k], ms[k], ss[k]] for k in range(len(mg))]
        files.append(write_csv(os.path.join(out_dir, "trajectory.csv"),
                               ["sigma", "k", "mean_gd", "std_gd", "mean_sam", "std_sam"], traj))
        files.append(write_csv(
            os.path.join(out_dir, "trials.csv"),
            ["sigma", "trial", "seed", "eta", "rho", "best_gd", "best_sam", "iter_gd", "iter_sam",
             "diverged_gd", "diverged_sam"],
            [[t.sigma, t.trial, t.seed, t.eta, t.rho, t.best_error["gd"], t.best_error["sam"],
              t.best_iter["gd"], t.best_iter["sam"], t.diverged["gd"], t.diverged["sam"]]
             for t in agg.trials]))
        s0 = agg.sigmas[0]
        k = np.arange(len(agg.curves[s0]["gd"][0]))
        files.append(write_svg(os.path.join(out_dir, "trajectory.svg"),
                               {"gd": (k, agg.curves[s0]["gd"][0]),
                                "sam": (k, agg.curves[s0]["sam"][0])},
                               title=f"{cfg.scenario} mean error, sigma={s0:g}"))
        summary["rows"] = agg.rows
        if cfg.scenario != "kernel_indefinite" and any(r["diverged_gd"] or r["diverged_sam"]
                                                        for r in agg.rows):
            raise RuntimeFailure("divergence guard hit in a scenario that forbids divergence")
    summary["config"] = cfg.to_dict()
    return summary


def check_report(raw) -> dict:
    report = {}
    if "spectrum" in raw or "model" in raw:
        s = spectrum_from_config(raw)
        cfg = _optim(raw)
        sigma = _number(raw, "sigma")
        signal = _number(raw, "signal_norm_sq") if "signal_norm_sq" in raw else None
        if np.any(s.d < 0):
            eps = _number(raw, "epsilon", positive=True, default=2.0 ** (1 / 20) - 1)
            try:
                cond = check_condition_kernel(s, cfg, eps)
            except ValueError as exc:
                raise ConfigError("spectrum", str(exc)) from exc
            win = iteration_window_kernel(s, cfg, sigma, eps, signal)
            report.update(mode="kernel", epsilon=eps, k_lower=win.k_lower, k_upper=win.k_upper,
                          window_nonempty=win.nonempty, snr=win.snr, note=win.note)
        else:
            try:
                cond = check_condition_linear(s, cfg)
            except ValueError as exc:
                raise ConfigError("spectrum", str(exc)) from exc
            bound = iteration_bound_linear(s, cfg, sigma, signal)
            report.update(mode="linear", k_upper=bound.value, snr=bound.snr, note=bound.note)
        report.update(feasible=cond.feasible,
                      c0_interval=None if cond.c0_interval is None else list(cond.c0_interval),
                      condition_notes=cond.notes)
        if cond.epsilon_ok is not None:
            report["epsilon_ok"] = cond.epsilon_ok
    if "stochastic" in raw:
        st = raw["stochastic"]
        if not isinstance(st, dict):
            raise ConfigError("stochastic", "must be an object")
        p = _number(st, "p", "stochastic.", positive=True)
        k = int(_number(st, "k", "stochastic."))
        wn = _number(st, "w_bar_norm_sq", "stochastic.", default=1.0)
        cfg = _optim(raw)
        try:
            diff = stochastic_error_difference(p, cfg, k, wn)
        except ValueError as exc:
            raise ConfigError("stochastic", str(exc)) from exc
        report["stochastic"] = {"difference": diff, "sam_error": stochastic_sam_error(p, cfg, k, wn)}
    if not report:
        raise ConfigError("spectrum", "missing required field (or model, or stochastic)")
    return report


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, float):
        return format(v, ".10g")
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def cmd_check(args, raw, out_dir, files, notes):
    report = check_report(raw)
    if out_dir is not None:
        path = os.path.join(out_dir, "check.json")
        write_json_atomic(path, report)
        files.append(path)
    if not args.json:
        for key in ("mode", "feasible", "c0_interval", "epsilon_ok", "snr", "k_lower", "k_upper",
                    "window_nonempty"):
            if key in report:
                print(f"{key}: {_fmt(report[key])}")
        if report.get("note"):
            print(report["note"])
        for n in report.get("condition_notes", []):
            print(f"condition: {n}")
        if "stochastic" in report:
            print(f"stochastic SAM - SGD error difference: {_fmt(report['stochastic']['difference'])}")
    return report


COMMANDS = {"predict": cmd_predict, "simulate": cmd_simulate, "check": cmd_check}


def default_workers():
    env = os.environ.get("SAMLAB_WORKERS")
    if env is None or env == "":
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        return None


def build_parser():
    parser = argparse.ArgumentParser(prog="samlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"samlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides base_seed")
        p.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: $SAMLAB_WORKERS or 1)")
        p.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.workers is None:
        args.workers = default_workers()
        if args.workers is None:
            print("error: SAMLAB_WORKERS must be an integer", file=sys.stderr)
            return EXIT_CONFIG
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be nonnegative", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = args.out
    if out_dir is None and args.command != "check":
        out_dir = "samlab_out"
    try:
        raw = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    files, notes = [], []
    seed = args.seed if args.seed is not None else raw.get("base_seed", 0)
    status, code, error, summary = "ok", EXIT_OK, None, {}
    try:
        summary = COMMANDS[args.command](args, raw, out_dir, files, notes)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        status, code, error = "failed", EXIT_RUNTIME, f"{type(exc).__name__}: {exc}"
        print(f"runtime error: {error}", file=sys.stderr)
    manifest = None
    if out_dir is not None:
        manifest = build_manifest(args.command, raw, seed, files, notes, status, error,
                                  {"workers": args.workers})
        path = os.path.join(out_dir, "manifest.json")
        manifest["files"] = sorted(manifest["files"] + ["manifest.json"])
        write_json_atomic(path, manifest)
    if args.json:
        payload = summary if args.command == "check" else {"manifest": manifest, "summary": summary}
        print(json.dumps(json_safe(payload), indent=2, sort_keys=True))
    elif args.command != "check" and code == EXIT_OK:
        print(f"wrote {len(files)} files to {out_dir}")
    return code


if __name__ == "__main__":
    sys.exit(main())
