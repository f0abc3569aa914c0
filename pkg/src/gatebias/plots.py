"""Minimal deterministic SVG charts: bars, lines, and a scatter with a parity diagonal.

Output depends only on the inputs: fixed viewport, fixed number formatting and
series drawn in the order given.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 60
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _f(x: float) -> str:
    return f"{x:.2f}"


def _range(values, pad=0.05, fixed=None):
    if fixed is not None:
        return fixed
    vals = np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64)
    if vals.size == 0:
        return 0.0, 1.0
    lo, hi = float(vals.min()), float(vals.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - pad * span, hi + pad * span


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, xr, yr):
        self.xr, self.yr = xr, yr
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 15}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="18" y="{HEIGHT / 2}" text-anchor="middle" '
            f'transform="rotate(-90 18 {HEIGHT / 2})">{escape(ylabel)}</text>',
        ]
        self._axes()

    def x(self, v: float) -> float:
        lo, hi = self.xr
        return LEFT + (v - lo) / (hi - lo) * (WIDTH - LEFT - RIGHT)

    def y(self, v: float) -> float:
        lo, hi = self.yr
        return HEIGHT - BOTTOM - (v - lo) / (hi - lo) * (HEIGHT - TOP - BOTTOM)

    def _axes(self):
        x0, x1 = LEFT, WIDTH - RIGHT
        y0, y1 = HEIGHT - BOTTOM, TOP
        self.parts.append(f'<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="black"/>')
        for i in range(5):
            xv = self.xr[0] + i * (self.xr[1] - self.xr[0]) / 4
            yv = self.yr[0] + i * (self.yr[1] - self.yr[0]) / 4
            self.parts.append(f'<text x="{_f(self.x(xv))}" y="{y0 + 16}" text-anchor="middle">{xv:.3g}</text>')
            self.parts.append(f'<text x="{x0 - 6}" y="{_f(self.y(yv) + 4)}" text-anchor="end">{yv:.3g}</text>')

    def polyline(self, xs, ys, color, dash=False):
        pts = " ".join(f"{_f(self.x(a))},{_f(self.y(b))}" for a, b in zip(xs, ys) if np.isfinite(b))
        if pts:
            extra = ' stroke-dasharray="5,4"' if dash else ""
            self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{extra}/>')

    def legend(self, names):
        for i, (name, color) in enumerate(names):
            y = TOP + 8 + 16 * i
            self.parts.append(f'<rect x="{WIDTH - RIGHT - 150}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
            self.parts.append(f'<text x="{WIDTH - RIGHT - 135}" y="{y + 1}">{escape(name)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def bar_chart(labels, values, title: str, xlabel: str = "", ylabel: str = "") -> str:
    values = [float(v) for v in values]
    n = len(values)
    yr = _range(values + [0.0])
    c = _Canvas(title, xlabel, ylabel, (0.0, float(max(n, 1))), yr)
    base = c.y(max(yr[0], 0.0) if yr[0] > 0 else min(0.0, yr[1]))
    for i, (lab, v) in enumerate(zip(labels, values)):
        x0, x1 = c.x(i + 0.1), c.x(i + 0.9)
        top = c.y(v)
        c.parts.append(
            f'<rect x="{_f(x0)}" y="{_f(min(top, base))}" width="{_f(x1 - x0)}" '
            f'height="{_f(abs(base - top))}" fill="{PALETTE[0]}"/>'
        )
        c.parts.append(
            f'<text x="{_f((x0 + x1) / 2)}" y="{HEIGHT - BOTTOM + 30}" text-anchor="middle" '
            f'font-size="9">{escape(str(lab))}</text>'
        )
    return c.render()


def line_chart(x, series: dict, title: str, xlabel: str = "", ylabel: str = "", y_range=None,
               dashed: tuple = ()) -> str:
    x = [float(v) for v in x]
    allv = [float(v) for ys in series.values() for v in ys]
    c = _Canvas(title, xlabel, ylabel, _range(x, pad=0.0), _range(allv, fixed=y_range))
    names = []
    for i, (name, ys) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        c.polyline(x, [float(v) for v in ys], color, dash=name in dashed)
        names.append((name, color))
    c.legend(names)
    return c.render()


def scatter(groups: dict, title: str, xlabel: str = "", ylabel: str = "", diagonal: bool = True) -> str:
    """``groups`` maps a legend name to ``(xs, ys)``; one circle per point."""
    xs = [float(v) for gx, _ in groups.values() for v in gx]
    ys = [float(v) for _, gy in groups.values() for v in gy]
    lo, hi = _range(xs + ys) if xs else (0.0, 1.0)
    c = _Canvas(title, xlabel, ylabel, (lo, hi), (lo, hi))
    if diagonal:
        c.parts.append(
            f'<line x1="{_f(c.x(lo))}" y1="{_f(c.y(lo))}" x2="{_f(c.x(hi))}" y2="{_f(c.y(hi))}" '
            f'stroke="gray" stroke-dasharray="4,4"/>'
        )
    names = []
    for i, (name, (gx, gy)) in enumerate(groups.items()):
        color = PALETTE[i % len(PALETTE)]
        c.parts.append(f'<g fill="{color}" fill-opacity="0.35">')
        c.parts.extend(f'<circle cx="{_f(c.x(float(a)))}" cy="{_f(c.y(float(b)))}" r="1.5"/>' for a, b in zip(gx, gy))
        c.parts.append("</g>")
        names.append((name, color))
    c.legend(names)
    return c.render()


def loss_chart(losses, title: str = "SAE training loss", stage_boundary: int | None = None, points: int = 400) -> str:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        return line_chart([0, 1], {}, title, "step", "log10 loss")
    idx = np.unique(np.linspace(0, losses.size - 1, min(points, losses.size)).astype(np.int64))
    vals = np.log10(np.maximum(losses[idx], 1e-300))
    svg = line_chart(idx.tolist(), {"loss": vals.tolist()}, title, "step", "log10 loss")
    if stage_boundary is not None and 0 < stage_boundary < losses.size:
        # mark where the second curriculum stage starts
        xr = (float(idx[0]), float(idx[-1]))
        xpix = LEFT + (stage_boundary - xr[0]) / max(xr[1] - xr[0], 1e-12) * (WIDTH - LEFT - RIGHT)
        mark = f'<line x1="{_f(xpix)}" y1="{TOP}" x2="{_f(xpix)}" y2="{HEIGHT - BOTTOM}" stroke="gray" stroke-dasharray="2,3"/>'
        svg = svg.replace("</svg>", mark + "\n</svg>")
    return svg

