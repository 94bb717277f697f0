"""Minimal line plots as plain SVG text (fixed viewBox, deterministic output)."""

from __future__ import annotations

from html import escape
from typing import Mapping, Sequence

import numpy as np

WIDTH, HEIGHT = 640, 360
_MARGIN = (48, 16, 28, 40)  # left, right, top, bottom
_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _num(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def line_plot(series: Mapping[str, Sequence[float]], xs: Sequence[float] | None = None,
              title: str = "", y_range: tuple[float, float] = (0.0, 1.0),
              vlines: Sequence[float] = (), hline: float | None = None) -> str:
    """Polylines for each named series on shared axes; ``vlines`` mark x positions."""
    left, right, top, bottom = _MARGIN
    pw, ph = WIDTH - left - right, HEIGHT - top - bottom
    n = max((len(v) for v in series.values()), default=0)
    if xs is None:
        xs = np.arange(n, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    x0, x1 = (float(xs.min()), float(xs.max())) if len(xs) else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    y0, y1 = y_range

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1.0 - (min(max(y, y0), y1) - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
           f'width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:g}" y="16" text-anchor="middle">{escape(title)}</text>']
    # axes and ticks
    out.append(f'<polyline fill="none" stroke="black" points="{left},{top} {left},{top + ph} {left + pw},{top + ph}"/>')
    for k in range(6):
        y = y0 + (y1 - y0) * k / 5
        out.append(f'<line x1="{left - 4}" y1="{_num(py(y))}" x2="{left}" y2="{_num(py(y))}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{_num(py(y) + 4)}" text-anchor="end">{_num(y)}</text>')
    for k in range(6):
        x = x0 + (x1 - x0) * k / 5
        out.append(f'<text x="{_num(px(x))}" y="{top + ph + 16}" text-anchor="middle">{_num(x)}</text>')
    for v in vlines:
        out.append(f'<line x1="{_num(px(v))}" y1="{top}" x2="{_num(px(v))}" y2="{top + ph}" '
                   f'stroke="#999" stroke-dasharray="4,3" class="boundary" data-x="{_num(v)}"/>')
    if hline is not None:
        out.append(f'<line x1="{left}" y1="{_num(py(hline))}" x2="{left + pw}" y2="{_num(py(hline))}" '
                   f'stroke="#555" stroke-dasharray="2,2"/>')
    for j, (name, ys) in enumerate(series.items()):
        ys = np.asarray(ys, dtype=np.float64)
        colour = _COLOURS[j % len(_COLOURS)]
        pts = " ".join(f"{_num(px(x))},{_num(py(y))}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.2" points="{pts}"/>')
        out.append(f'<text x="{left + pw - 4}" y="{top + 14 + 14 * j}" text-anchor="end" fill="{colour}">'
                   f'{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(values: Mapping[str, float], title: str = "", y_range: tuple[float, float] = (0.0, 1.0)) -> str:
    left, right, top, bottom = _MARGIN
    pw, ph = WIDTH - left - right, HEIGHT - top - bottom
    y0, y1 = y_range
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
           f'width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:g}" y="16" text-anchor="middle">{escape(title)}</text>',
           f'<polyline fill="none" stroke="black" points="{left},{top} {left},{top + ph} {left + pw},{top + ph}"/>']
    n = max(len(values), 1)
    slot = pw / n
    for j, (name, v) in enumerate(values.items()):
        h = (min(max(v, y0), y1) - y0) / (y1 - y0) * ph
        x = left + j * slot + slot * 0.15
        out.append(f'<rect x="{_num(x)}" y="{_num(top + ph - h)}" width="{_num(slot * 0.7)}" '
                   f'height="{_num(h)}" fill="{_COLOURS[j % len(_COLOURS)]}"/>')
        out.append(f'<text x="{_num(x + slot * 0.35)}" y="{top + ph + 14}" text-anchor="middle">{escape(name)}</text>')
        out.append(f'<text x="{_num(x + slot * 0.35)}" y="{_num(top + ph - h - 3)}" text-anchor="middle">{v:.3f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
