"""CSV, SVG and manifest writers.

CSV floats use 17 significant digits so a re-parse reproduces every double
exactly; files use LF line endings and never depend on the locale.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from datetime import datetime, timezone
from xml.sax.saxutils import escape

import numpy as np

from . import __version__


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".17g")


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        if isinstance(row, dict):
            row = [row[h] for h in header]
        lines.append(",".join(format_value(v) for v in row))
    with open(path, "w", newline="\n", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_csv(path):
    """Header and float columns of a file written by ``write_csv``."""
    with open(path, encoding="ascii") as fh:
        header = fh.readline().strip().split(",")
        data = [[float(x) for x in line.strip().split(",")] for line in fh if line.strip()]
    cols = np.array(data, dtype=float).reshape(-1, len(header))
    return {h: cols[:, i] for i, h in enumerate(header)}


CURVE_FIELDS = ("bias_sq", "var_plus", "var_minus", "error")


def write_curves(path, curves: dict):
    """Wide curve table: ``k`` then ``<name>_<field>`` for each curve in order."""
    names = list(curves)
    k = curves[names[0]].k
    header = ["k"] + [f"{n}_{f}" for n in names for f in CURVE_FIELDS]
    rows = []
    for i in range(len(k)):
        row = [int(k[i])]
        for n in names:
            c = curves[n]
            row += [c.bias_sq[i], c.var_plus[i], c.var_minus[i], c.error[i]]
        rows.append(row)
    return write_csv(path, header, rows)


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def write_svg(path, series: dict, title="", xlabel="k", ylabel="error", width=640, height=400):
    """Hand-emitted line chart. Non-finite points are dropped; the y axis
    switches to log10 when the positive data span more than three decades."""
    clean = {}
    for name, (x, y) in series.items():
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        keep = np.isfinite(x) & np.isfinite(y)
        clean[name] = (x[keep], y[keep])
    ys = np.concatenate([y for _, y in clean.values()]) if clean else np.array([])
    log_y = ys.size > 0 and ys.min() > 0 and ys.max() / ys.min() > 1e3
    if log_y:
        clean = {n: (x, np.log10(y)) for n, (x, y) in clean.items()}
        ys = np.log10(ys)
        ylabel = f"log10 {ylabel}"
    xs = np.concatenate([x for x, _ in clean.values()]) if clean else np.array([0.0])
    x0, x1 = (xs.min(), xs.max()) if xs.size else (0.0, 1.0)
    y0, y1 = (ys.min(), ys.max()) if ys.size else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    left, right, top, bottom = 70, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for t in range(5):
        xv = x0 + (x1 - x0) * t / 4
        yv = y0 + (y1 - y0) * t / 4
        out.append(f'<text x="{px(xv):.1f}" y="{top + ph + 16}" text-anchor="middle" '
                   f'font-size="10">{xv:.4g}</text>')
        out.append(f'<text x="{left - 6}" y="{py(yv) + 3:.1f}" text-anchor="end" '
                   f'font-size="10">{yv:.4g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" '
               f'font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, (x, y)) in enumerate(clean.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 14 + 16 * i
        out.append(f'<line x1="{left + pw - 90}" y1="{ly}" x2="{left + pw - 70}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 64}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")
    return path


def json_safe(v):
    """Recursively convert numpy values and map non-finite floats to strings."""
    if isinstance(v, dict):
        return {k: json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [json_safe(x) for x in v]
    if isinstance(v, np.ndarray):
        return json_safe(v.tolist())
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return format_value(v)
    return v


def write_json_atomic(path, payload):
    """Write JSON through a temporary file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".manifest-", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(json_safe(payload), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def build_manifest(command, config, seed, files, warnings=(), status="ok", error=None, extra=None):
    m = {
        "command": command,
        "tool": "samlab",
        "version": __version__,
        "base_seed": seed,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": config,
        "files": sorted(os.path.basename(f) for f in files),
        "warnings": list(warnings),
        "status": status,
    }
    if error is not None:
        m["error"] = error
    if extra:
        m.update(extra)
    return m
