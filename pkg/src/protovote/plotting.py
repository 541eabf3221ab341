"""Dependency-free SVG line and bar charts for run reports."""

from __future__ import annotations

from pathlib import Path

import numpy as np

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 60, 20, 30, 50


def _axis_limits(lo: float, hi: float) -> tuple[float, float]:
    if hi <= lo:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _svg_open(title: str) -> list[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}">',
            f'<rect width="{_W}" height="{_H}" fill="white"/>',
            f'<text x="{_W / 2}" y="20" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{title}</text>']


def _axes(parts: list[str], x_label: str, y_label: str):
    parts.append(f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" '
                 f'y2="{_H - _MB}" stroke="black"/>')
    parts.append(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" '
                 f'stroke="black"/>')
    parts.append(f'<text x="{_W / 2}" y="{_H - 10}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12">{x_label}</text>')
    parts.append(f'<text x="15" y="{_H / 2}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12" '
                 f'transform="rotate(-90 15 {_H / 2})">{y_label}</text>')


def _ticks_y(parts: list[str], lo: float, hi: float):
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = lo + frac * (hi - lo)
        y = _H - _MB - frac * (_H - _MT - _MB)
        parts.append(f'<text x="{_ML - 6}" y="{y + 4}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="10">{v:.3g}</text>')


def line_chart(path: str | Path, series: dict[str, tuple], title: str = "",
               x_label: str = "", y_label: str = ""):
    """series: name -> (x array, y array). Writes an SVG file."""
    all_x = np.concatenate([np.asarray(x, dtype=float) for x, _ in series.values()])
    all_y = np.concatenate([np.asarray(y, dtype=float) for _, y in series.values()])
    x0, x1 = _axis_limits(float(all_x.min()), float(all_x.max()))
    y0, y1 = _axis_limits(float(all_y.min()), float(all_y.max()))

    def sx(v):
        return _ML + (v - x0) / (x1 - x0) * (_W - _ML - _MR)

    def sy(v):
        return _H - _MB - (v - y0) / (y1 - y0) * (_H - _MT - _MB)

    parts = _svg_open(title)
    _axes(parts, x_label, y_label)
    _ticks_y(parts, y0, y1)
    for si, (name, (xs, ys)) in enumerate(series.items()):
        color = _PALETTE[si % len(_PALETTE)]
        pts = " ".join(f"{sx(float(x)):.2f},{sy(float(y)):.2f}"
                       for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        parts.append(f'<text x="{_W - _MR - 5}" y="{_MT + 14 * (si + 1)}" '
                     f'text-anchor="end" font-family="sans-serif" '
                     f'font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def bar_chart(path: str | Path, labels: list[str], values, title: str = "",
              y_label: str = ""):
    values = np.asarray(values, dtype=float)
    lo = min(0.0, float(values.min()))
    y0, y1 = _axis_limits(lo, float(values.max()))

    def sy(v):
        return _H - _MB - (v - y0) / (y1 - y0) * (_H - _MT - _MB)

    parts = _svg_open(title)
    _axes(parts, "", y_label)
    _ticks_y(parts, y0, y1)
    n = len(labels)
    span = (_W - _ML - _MR) / max(n, 1)
    width = 0.7 * span
    for i, (label, v) in enumerate(zip(labels, values)):
        x = _ML + i * span + (span - width) / 2
        top = sy(max(v, 0.0))
        parts.append(f'<rect x="{x:.2f}" y="{top:.2f}" width="{width:.2f}" '
                     f'height="{abs(sy(0.0) - top):.2f}" '
                     f'fill="{_PALETTE[i % len(_PALETTE)]}"/>')
        parts.append(f'<text x="{x + width / 2:.2f}" y="{_H - _MB + 15}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="10">{label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
