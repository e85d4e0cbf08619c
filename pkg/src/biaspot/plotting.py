"""Minimal native SVG line plots on log-log axes."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _log_ticks(lo: float, hi: float) -> list[float]:
    return [10.0 ** k for k in range(math.floor(lo), math.ceil(hi) + 1)]


def loglog_svg(series: dict, xlabel: str, ylabel: str, title: str = "",
               width: int = 560, height: int = 400) -> str:
    """Render ``{name: (xs, ys)}`` as an SVG string; nonpositive points are dropped."""
    clean = {}
    for name, (xs, ys) in series.items():
        pts = [(math.log10(x), math.log10(y)) for x, y in zip(xs, ys)
               if x > 0 and y > 0 and math.isfinite(x) and math.isfinite(y)]
        if pts:
            clean[name] = pts
    left, right, top, bottom = 70, 20, 30, 50
    if not clean:
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
                f'<text x="{width // 2}" y="{height // 2}" text-anchor="middle">no data</text></svg>\n')
    all_x = [p[0] for pts in clean.values() for p in pts]
    all_y = [p[1] for pts in clean.values() for p in pts]
    x0, x1 = min(all_x), max(all_x)
    y0, y1 = min(all_y), max(all_y)
    if x1 - x0 < 1e-12:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(v):
        return left + (v - x0) / (x1 - x0) * (width - left - right)

    def sy(v):
        return height - bottom - (v - y0) / (y1 - y0) * (height - top - bottom)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{left}" y1="{height - bottom}" x2="{width - right}" y2="{height - bottom}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" stroke="black"/>']
    for t in _log_ticks(x0, x1):
        v = math.log10(t)
        if x0 - 1e-9 <= v <= x1 + 1e-9:
            out.append(f'<text x="{sx(v):.1f}" y="{height - bottom + 16}" text-anchor="middle">{t:g}</text>')
    for t in _log_ticks(y0, y1):
        v = math.log10(t)
        if y0 - 1e-9 <= v <= y1 + 1e-9:
            out.append(f'<text x="{left - 6}" y="{sy(v) + 4:.1f}" text-anchor="end">{t:g}</text>')
    out.append(f'<text x="{(left + width - right) / 2:.0f}" y="{height - 10}" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{(top + height - bottom) / 2:.0f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(top + height - bottom) / 2:.0f})">{escape(ylabel)}</text>')
    if title:
        out.append(f'<text x="{width / 2:.0f}" y="18" text-anchor="middle">{escape(title)}</text>')
    for k, (name, pts) in enumerate(clean.items()):
        color = COLORS[k % len(COLORS)]
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{width - right - 4}" y="{top + 14 * (k + 1)}" text-anchor="end" '
                   f'fill="{color}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_loglog_svg(path, series: dict, xlabel: str, ylabel: str, title: str = "") -> None:
    with open(path, "w") as fh:
        fh.write(loglog_svg(series, xlabel, ylabel, title))
