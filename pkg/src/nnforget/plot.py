"""Standalone SVG line charts of retention curves (no plotting dependency)."""

from __future__ import annotations

import datetime as _dt
import math
from typing import Dict, Iterable, List, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .exceptions import DataError
from .io import atomic_write_text
from .memfit import FitResult
from .retention import RetentionSeries
from .scheduler import ReviewEvent

WIDTH, HEIGHT = 720, 420
MARGIN = dict(left=64, right=140, top=36, bottom=52)
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def nice_ticks(lo: float, hi: float, target: int = 6) -> List[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(target - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    # ticks enclose [lo, hi] so the frame built from them holds every point
    first = math.floor(lo / step + 1e-9)
    last = math.ceil(hi / step - 1e-9)
    return [round(i * step, 10) for i in range(first, last + 1)]


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if v != int(v) else str(int(v))


class _Frame:
    def __init__(self, x_range, y_range):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        self.left = MARGIN["left"]
        self.right = WIDTH - MARGIN["right"]
        self.top = MARGIN["top"]
        self.bottom = HEIGHT - MARGIN["bottom"]

    def sx(self, x):
        span = (self.x1 - self.x0) or 1.0
        return self.left + (x - self.x0) / span * (self.right - self.left)

    def sy(self, y):
        span = (self.y1 - self.y0) or 1.0
        return self.bottom - (y - self.y0) / span * (self.bottom - self.top)

    def points(self, xs, ys) -> str:
        return " ".join(f"{self.sx(x):.2f},{self.sy(y):.2f}" for x, y in zip(xs, ys))


def render_svg(series: RetentionSeries, events: Sequence[ReviewEvent] = (),
               fits: Optional[Dict[int, FitResult]] = None, classes: Optional[Iterable[int]] = None,
               title: str = "Smoothed recall probability", timestamp: bool = False) -> str:
    classes = sorted(series.classes() if classes is None else set(classes))
    classes = [c for c in classes if len(series.for_class(c))]
    if not classes:
        raise DataError("nothing to plot: the series has no records for the requested classes")
    fits = fits or {}

    xs_all = np.concatenate([series.epochs(c) for c in classes])
    ys_all = np.concatenate([series.smoothed(c) for c in classes])
    x_ticks = nice_ticks(0.0, max(float(xs_all.max()), 1.0))
    y_lo = max(0.0, math.floor(ys_all.min() * 20) / 20 - 0.05)
    y_hi = min(1.0, math.ceil(ys_all.max() * 20) / 20 + 0.05)
    y_ticks = nice_ticks(y_lo, y_hi)
    fr = _Frame((x_ticks[0], x_ticks[-1]), (min(y_ticks[0], y_lo), max(y_ticks[-1], y_hi)))

    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">']
    if timestamp:
        out.append(f"<!-- generated {_dt.datetime.now(_dt.timezone.utc).isoformat()} -->")
    out.append(f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
    out.append(f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>')

    out.append('<g class="axes" stroke="black" stroke-width="1">')
    out.append(f'<line x1="{fr.left}" y1="{fr.bottom}" x2="{fr.right}" y2="{fr.bottom}"/>')
    out.append(f'<line x1="{fr.left}" y1="{fr.top}" x2="{fr.left}" y2="{fr.bottom}"/>')
    out.append("</g>")
    out.append('<g class="ticks" font-size="11">')
    for t in x_ticks:
        x = fr.sx(t)
        out.append(f'<line x1="{x:.2f}" y1="{fr.bottom}" x2="{x:.2f}" y2="{fr.bottom + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{fr.bottom + 18}" text-anchor="middle">{_fmt(t)}</text>')
    for t in y_ticks:
        y = fr.sy(t)
        out.append(f'<line x1="{fr.left - 5}" y1="{y:.2f}" x2="{fr.left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<line x1="{fr.left}" y1="{y:.2f}" x2="{fr.right}" y2="{y:.2f}" stroke="#e6e6e6"/>')
        out.append(f'<text x="{fr.left - 8}" y="{y + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append("</g>")
    out.append(f'<text x="{(fr.left + fr.right) / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">epoch</text>')
    out.append(f'<text x="16" y="{(fr.top + fr.bottom) / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(fr.top + fr.bottom) / 2:.1f})">recall probability</text>')

    for ev in events:
        x = fr.sx(ev.trigger_epoch)
        out.append(f'<line class="review-marker" x1="{x:.2f}" y1="{fr.top}" x2="{x:.2f}" y2="{fr.bottom}" '
                   f'stroke="#999999" stroke-width="1" stroke-dasharray="2,3"/>')

    legend = []
    for c in classes:
        color = PALETTE[c % len(PALETTE)]
        pts = fr.points(series.epochs(c), series.smoothed(c))
        out.append(f'<polyline class="series" data-class="{c}" fill="none" stroke="{color}" '
                   f'stroke-width="1.8" points="{pts}"/>')
        legend.append((color, f"class {c}", False))
        fit = fits.get(c)
        if fit is not None and fit.model is not None:
            grid = np.linspace(0.0, float(series.epochs(c).max()), 200)
            yv = np.clip(fit.model(grid), fr.y0, fr.y1)
            out.append(f'<polyline class="fit" data-class="{c}" fill="none" stroke="{color}" '
                       f'stroke-width="1.2" stroke-dasharray="6,4" points="{fr.points(grid, yv)}"/>')
            legend.append((color, f"{fit.family} fit", True))

    out.append('<g class="legend" font-size="11">')
    for i, (color, label, dashed) in enumerate(legend):
        y = fr.top + 10 + 18 * i
        dash = ' stroke-dasharray="6,4"' if dashed else ""
        out.append(f'<line x1="{fr.right + 12}" y1="{y}" x2="{fr.right + 36}" y2="{y}" '
                   f'stroke="{color}" stroke-width="2"{dash}/>')
        out.append(f'<text x="{fr.right + 42}" y="{y + 4}">{escape(label)}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_svg_plot(series: RetentionSeries, events, fit_results, path, **kwargs):
    """Write the chart to ``path`` atomically; see ``render_svg`` for options."""
    return atomic_write_text(path, render_svg(series, events, fit_results, **kwargs))
