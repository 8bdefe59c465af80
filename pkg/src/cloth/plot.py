"""Dependency-free SVG line charts for metrics CSV files."""
import csv
import math
from xml.sax.saxutils import escape

from .errors import ConfigError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 20, 50


def read_columns(path, columns, x="iter"):
    """(x values, {column: values}) from a CSV; non-finite cells become None."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames
            rows = list(reader)
    except FileNotFoundError:
        raise ConfigError("csv", f"no such file: {path}") from None
    if not header or not rows:
        raise ConfigError("csv", f"{path} holds no data rows")
    for name in (x, *columns):
        if name not in header:
            raise ConfigError("columns", f"'{name}' is not a column of {path} (have {', '.join(header)})")

    def num(cell, name, line):
        try:
            v = float(cell)
        except (TypeError, ValueError):
            raise ConfigError(name, f"non-numeric cell {cell!r} on data row {line}") from None
        return v if math.isfinite(v) else None

    xs = [num(r[x], x, i + 1) for i, r in enumerate(rows)]
    ys = {c: [num(r[c], c, i + 1) for i, r in enumerate(rows)] for c in columns}
    return xs, ys


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def _fmt(v):
    return f"{v:.4g}"


def render_svg(xs, series, title="", x_label="iter"):
    pts = [(x, y) for ys in series.values() for x, y in zip(xs, ys) if x is not None and y is not None]
    if pts:
        x_lo, x_hi = min(p[0] for p in pts), max(p[0] for p in pts)
        y_lo, y_hi = min(p[1] for p in pts), max(p[1] for p in pts)
    else:
        x_lo, x_hi, y_lo, y_hi = 0.0, 1.0, 0.0, 1.0
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(x):
        return LEFT + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return TOP + (1.0 - (y - y_lo) / (y_hi - y_lo)) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<title>{escape(title or ", ".join(series))}</title>',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
    ]
    for t in _ticks(x_lo, x_hi):
        out.append(f'<line x1="{sx(t):.2f}" y1="{TOP + ph}" x2="{sx(t):.2f}" y2="{TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.2f}" y="{TOP + ph + 16}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y_lo, y_hi):
        out.append(f'<line x1="{LEFT - 4}" y1="{sy(t):.2f}" x2="{LEFT}" y2="{sy(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{sy(t) + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(x_label)}</text>')
    for k, (name, ys) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        # gaps (missing values) split a series into several polylines
        runs, cur = [], []
        for x, y in zip(xs, ys):
            if x is None or y is None:
                if cur:
                    runs.append(cur)
                cur = []
            else:
                cur.append(f"{sx(x):.2f},{sy(y):.2f}")
        if cur:
            runs.append(cur)
        for run in runs:
            out.append(f'<polyline class="series" data-column="{escape(name)}" fill="none" stroke="{color}" '
                       f'stroke-width="1.5" points="{" ".join(run)}"/>')
        ly = TOP + 14 + 18 * k
        lx = LEFT + pw + 12
        out.append(f'<g class="legend"><line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>'
                   f'<text x="{lx + 24}" y="{ly}">{escape(name)}</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_plot(csv_path, columns, out_path, x="iter"):
    if not columns:
        raise ConfigError("columns", "name at least one column")
    xs, series = read_columns(csv_path, columns, x)
    svg = render_svg(xs, series, title=f"{', '.join(columns)} vs {x}", x_label=x)
    with open(out_path, "w") as fh:
        fh.write(svg)
    return out_path
