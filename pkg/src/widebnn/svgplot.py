"""Minimal static SVG line charts, written directly without a plotting stack.

Figures here are run artifacts meant to be opened after the fact, so the
writer supports exactly what the experiment plots need: lines, shaded bands,
scatter points, optional log axes, ticks and a legend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

WIDTH, HEIGHT = 720, 460
MARGIN = {"left": 64, "right": 24, "top": 36, "bottom": 48}
PALETTE = ["#1f6fb2", "#d1495b", "#3a7d44", "#8d6a9f", "#c77b21", "#4d4d4d"]


@dataclass
class Series:
    label: str
    x: list
    y: list
    color: str | None = None
    dashed: bool = False


@dataclass
class Band:
    label: str
    x: list
    lo: list
    hi: list
    color: str | None = None
    opacity: float = 0.25


@dataclass
class Points:
    label: str
    x: list
    y: list
    color: str = "#111111"
    radius: float = 3.5


@dataclass
class Chart:
    title: str = ""
    x_label: str = ""
    y_label: str = ""
    log_x: bool = False
    log_y: bool = False
    series: list = field(default_factory=list)
    bands: list = field(default_factory=list)
    points: list = field(default_factory=list)

    def add_series(self, label, x, y, color=None, dashed=False):
        self.series.append(Series(label, list(x), list(y), color, dashed))

    def add_band(self, label, x, lo, hi, color=None, opacity=0.25):
        self.bands.append(Band(label, list(x), list(lo), list(hi), color, opacity))

    def add_points(self, label, x, y, color="#111111"):
        self.points.append(Points(label, list(x), list(y), color))

    # -- rendering ----------------------------------------------------------

    def _all_xy(self):
        xs, ys = [], []
        for s in self.series:
            xs += list(s.x)
            ys += list(s.y)
        for b in self.bands:
            xs += list(b.x)
            ys += list(b.lo) + list(b.hi)
        for p in self.points:
            xs += list(p.x)
            ys += list(p.y)
        return xs, ys

    def render(self) -> str:
        xs, ys = self._all_xy()
        if not xs:
            raise ValueError("chart has no data")
        tx = _AxisTransform(xs, self.log_x, MARGIN["left"], WIDTH - MARGIN["right"])
        ty = _AxisTransform(ys, self.log_y, HEIGHT - MARGIN["bottom"], MARGIN["top"])

        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="Helvetica, Arial, sans-serif">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        ]
        out += _axes(tx, ty, self.x_label, self.y_label, self.log_x, self.log_y)
        if self.title:
            out.append(
                f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" '
                f'font-size="14">{_esc(self.title)}</text>'
            )

        color_iter = iter(PALETTE * 10)
        for b in self.bands:
            color = b.color or next(color_iter)
            fwd = [(tx(v), ty(w)) for v, w in zip(b.x, b.hi)]
            rev = [(tx(v), ty(w)) for v, w in zip(reversed(b.x), list(reversed(b.lo)))]
            pts = " ".join(f"{a:.2f},{c:.2f}" for a, c in fwd + rev)
            out.append(f'<polygon points="{pts}" fill="{color}" opacity="{b.opacity}"/>')
        for s in self.series:
            color = s.color or next(color_iter)
            pts = " ".join(f"{tx(v):.2f},{ty(w):.2f}" for v, w in zip(s.x, s.y))
            dash = ' stroke-dasharray="6,4"' if s.dashed else ""
            out.append(
                f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"{dash}/>'
            )
        for p in self.points:
            for v, w in zip(p.x, p.y):
                out.append(
                    f'<circle cx="{tx(v):.2f}" cy="{ty(w):.2f}" r="{p.radius}" fill="{p.color}"/>'
                )
        out += self._legend()
        out.append("</svg>")
        return "\n".join(out)

    def _legend(self):
        entries = [(s.label, s.color) for s in self.series if s.label]
        entries += [(p.label, p.color) for p in self.points if p.label]
        if not entries:
            return []
        color_iter = iter(PALETTE * 10)
        x0, y0 = MARGIN["left"] + 10, MARGIN["top"] + 6
        rows = []
        for i, (label, color) in enumerate(entries):
            c = color or next(color_iter)
            y = y0 + 16 * i
            rows.append(f'<rect x="{x0}" y="{y - 8}" width="12" height="4" fill="{c}"/>')
            rows.append(f'<text x="{x0 + 18}" y="{y}" font-size="11">{_esc(label)}</text>')
        return rows

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.render())


class _AxisTransform:
    def __init__(self, values, log: bool, lo_px: float, hi_px: float):
        vals = [v for v in values if not log or v > 0]
        if not vals:
            raise ValueError("log axis needs positive values")
        vmin, vmax = min(vals), max(vals)
        if log:
            vmin, vmax = math.log10(vmin), math.log10(vmax)
        if vmax - vmin < 1e-12:
            vmin, vmax = vmin - 0.5, vmax + 0.5
        pad = 0.04 * (vmax - vmin)
        self.vmin, self.vmax = vmin - pad, vmax + pad
        self.lo_px, self.hi_px = lo_px, hi_px
        self.log = log

    def __call__(self, v: float) -> float:
        t = math.log10(v) if self.log else v
        frac = (t - self.vmin) / (self.vmax - self.vmin)
        return self.lo_px + frac * (self.hi_px - self.lo_px)

    def ticks(self, n=5):
        raw = [self.vmin + (self.vmax - self.vmin) * i / (n - 1) for i in range(n)]
        return [(10**t if self.log else t) for t in raw]


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.1e}"
    return f"{v:.3g}"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _axes(tx, ty, x_label, y_label, log_x, log_y):
    x0, x1 = tx.lo_px, tx.hi_px
    y0, y1 = ty.lo_px, ty.hi_px
    rows = [
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="#333" stroke-width="1"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#333" stroke-width="1"/>',
    ]
    for v in tx.ticks():
        px = tx(v)
        rows.append(f'<line x1="{px:.2f}" y1="{y0}" x2="{px:.2f}" y2="{y0 + 5}" stroke="#333"/>')
        rows.append(
            f'<text x="{px:.2f}" y="{y0 + 18}" text-anchor="middle" font-size="10">{_fmt(v)}</text>'
        )
    for v in ty.ticks():
        py = ty(v)
        rows.append(f'<line x1="{x0 - 5}" y1="{py:.2f}" x2="{x0}" y2="{py:.2f}" stroke="#333"/>')
        rows.append(
            f'<text x="{x0 - 8}" y="{py + 3:.2f}" text-anchor="end" font-size="10">{_fmt(v)}</text>'
        )
    if x_label:
        rows.append(
            f'<text x="{(x0 + x1) / 2:.1f}" y="{y0 + 36}" text-anchor="middle" '
            f'font-size="12">{_esc(x_label)}</text>'
        )
    if y_label:
        cy = (y0 + y1) / 2
        rows.append(
            f'<text x="16" y="{cy:.1f}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 16 {cy:.1f})">{_esc(y_label)}</text>'
        )
    return rows
