"""Deterministic SVG fan charts of past estimates and projections."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence
from xml.sax.saxutils import escape

from .data_model import CENTER_OFFSET, Observation, ReferenceSeries
from .projection import QuantileTable

PAST_COLORS = ("#f4a582", "#d6604d", "#b2182b")      # 95% band, 80% band, median
FUTURE_COLORS = ("#c6dbef", "#6baed6", "#08519c")


@dataclass(frozen=True)
class ChartLayout:
    width: int = 640
    height: int = 400
    margin_left: int = 56
    margin_right: int = 16
    margin_top: int = 32
    margin_bottom: int = 40


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _nice_ticks(lo: float, hi: float, n: int = 6) -> list[float]:
    span = hi - lo
    if span <= 0:
        return [lo]
    raw = span / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.ceil(lo / step - 1e-9) * step
    out = []
    x = first
    while x <= hi + 1e-9:
        out.append(round(x, 10))
        x += step
    return out


class _Axes:
    def __init__(self, layout: ChartLayout, x_range, y_range):
        self.l = layout
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range

    def x(self, v: float) -> float:
        w = self.l.width - self.l.margin_left - self.l.margin_right
        return self.l.margin_left + (v - self.x0) / (self.x1 - self.x0) * w

    def y(self, v: float) -> float:
        h = self.l.height - self.l.margin_top - self.l.margin_bottom
        return self.l.margin_top + (1.0 - (v - self.y0) / (self.y1 - self.y0)) * h

    def points(self, xs, ys) -> str:
        return " ".join(f"{_fmt(self.x(a))},{_fmt(self.y(b))}" for a, b in zip(xs, ys))


def _series(table: QuantileTable | None, country: str):
    if table is None:
        return [], {}
    periods = table.periods(country)
    xs = [p + CENTER_OFFSET for p in periods]
    cols = {p: [table.get(country, per, p) for per in periods] for p in table.probs}
    return xs, cols


def _band(ax: _Axes, xs, lo, hi, color: str, opacity: float) -> str:
    pts = ax.points(list(xs) + list(reversed(xs)), list(lo) + list(reversed(hi)))
    return f'<polygon points="{pts}" fill="{color}" fill-opacity="{opacity}" stroke="none"/>'


def fan_chart(
    country: str,
    future: QuantileTable | None = None,
    past: QuantileTable | None = None,
    present: float | None = None,
    observations: Sequence[Observation] = (),
    reference: ReferenceSeries | None = None,
    layout: ChartLayout = ChartLayout(),
    title: str | None = None,
) -> str:
    """Render median lines with 80%/95% bands; past in red tones, future in blue.

    ``present`` draws a dashed vertical marker (e.g. the last estimation
    period centre).  Output is plain text with fixed numeric formatting, so
    identical inputs give identical files.
    """
    px, pq = _series(past, country)
    fx, fq = _series(future, country)
    if not px and not fx:
        raise ValueError(f"no quantiles for {country!r}")
    obs = [o for o in observations if o.country == country]
    xs = px + fx + [o.ref_date for o in obs]
    ys = [v for cols in (pq, fq) for col in cols.values() for v in col] + [o.value for o in obs]
    if reference is not None:
        xs += list(reference.centers)
        ys += list(reference.values)
    x_lo, x_hi = math.floor(min(xs) / 10) * 10, math.ceil(max(xs) / 10) * 10
    if x_hi == x_lo:
        x_hi = x_lo + 10
    y_hi = max(1.0, math.ceil(max(ys) + 0.5))
    ax = _Axes(layout, (x_lo, x_hi), (0.0, y_hi))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{layout.width}" height="{layout.height}" '
           f'viewBox="0 0 {layout.width} {layout.height}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{layout.width}" height="{layout.height}" fill="white"/>',
           f'<text x="{layout.width // 2}" y="20" text-anchor="middle" font-size="14">'
           f'{escape(title or country)}</text>']
    # axes and grid
    bottom, top = ax.y(0.0), ax.y(y_hi)
    left, right = ax.x(x_lo), ax.x(x_hi)
    for t in _nice_ticks(0.0, y_hi):
        yy = _fmt(ax.y(t))
        out.append(f'<line x1="{_fmt(left)}" y1="{yy}" x2="{_fmt(right)}" y2="{yy}" stroke="#e0e0e0"/>')
        out.append(f'<text x="{_fmt(left - 6)}" y="{yy}" text-anchor="end" dominant-baseline="middle">{t:g}</text>')
    for t in _nice_ticks(x_lo, x_hi, 8):
        xx = _fmt(ax.x(t))
        out.append(f'<line x1="{xx}" y1="{_fmt(bottom)}" x2="{xx}" y2="{_fmt(bottom + 4)}" stroke="black"/>')
        out.append(f'<text x="{xx}" y="{_fmt(bottom + 16)}" text-anchor="middle">{t:g}</text>')
    out.append(f'<polyline points="{_fmt(left)},{_fmt(top)} {_fmt(left)},{_fmt(bottom)} '
               f'{_fmt(right)},{_fmt(bottom)}" fill="none" stroke="black"/>')
    out.append(f'<text x="14" y="{_fmt((top + bottom) / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 14 {_fmt((top + bottom) / 2)})">TFR</text>')

    for xs_, q, colors, cls in ((px, pq, PAST_COLORS, "past"), (fx, fq, FUTURE_COLORS, "future")):
        if not xs_:
            continue
        out.append(f'<g class="{cls}">')
        for (lo, hi), color, opacity in (((0.025, 0.975), colors[0], 0.6), ((0.1, 0.9), colors[1], 0.6)):
            if lo in q and hi in q:
                out.append(_band(ax, xs_, q[lo], q[hi], color, opacity))
        if 0.5 in q:
            out.append(f'<polyline points="{ax.points(xs_, q[0.5])}" fill="none" stroke="{colors[2]}" '
                       f'stroke-width="2"/>')
        out.append("</g>")

    if reference is not None:
        out.append(f'<polyline class="reference" points="{ax.points(reference.centers, reference.values)}" '
                   f'fill="none" stroke="black" stroke-dasharray="2,2"/>')
    if obs:
        out.append('<g class="observations">')
        for o in sorted(obs, key=Observation.sort_key):
            out.append(f'<circle cx="{_fmt(ax.x(o.ref_date))}" cy="{_fmt(ax.y(o.value))}" r="2.5" '
                       f'fill="#555555" fill-opacity="0.7"/>')
        out.append("</g>")
    if present is not None:
        xx = _fmt(ax.x(present))
        out.append(f'<line class="present" x1="{xx}" y1="{_fmt(top)}" x2="{xx}" y2="{_fmt(bottom)}" '
                   f'stroke="black" stroke-dasharray="5,4"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
