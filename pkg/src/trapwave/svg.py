"""Minimal hand-written SVG line plots (no plotting library needed)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


@dataclass
class Series:
    x: np.ndarray
    y: np.ndarray
    label: str
    dashed: bool = False
    markers: bool = False


def _ticks(lo: float, hi: float, log: bool) -> list[float]:
    if log:
        a, b = math.floor(lo), math.ceil(hi)
        step = max(1, (b - a) // 6)
        return [float(k) for k in range(a, b + 1, step)]
    span = hi - lo or 1.0
    raw = span / 5
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step + 1e-9) + 1)]


def line_plot(series: list[Series], path: str | Path, title: str = "", xlabel: str = "",
              ylabel: str = "", logx: bool = False, logy: bool = False,
              width: int = 640, height: int = 420) -> None:
    """Write a line plot of the given series to ``path``."""
    ml, mr, mt, mb = 70, 20, 36, 50
    pw, ph = width - ml - mr, height - mt - mb

    def tx(v):
        return np.log10(v) if logx else np.asarray(v, dtype=float)

    def ty(v):
        return np.log10(v) if logy else np.asarray(v, dtype=float)

    xs, ys = [], []
    for s in series:
        ok = np.isfinite(s.x) & np.isfinite(s.y)
        if logx:
            ok &= s.x > 0
        if logy:
            ok &= s.y > 0
        xs.append(tx(s.x[ok]))
        ys.append(ty(s.y[ok]))
    allx = np.concatenate(xs) if xs else np.array([0.0, 1.0])
    ally = np.concatenate(ys) if ys else np.array([0.0, 1.0])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 0.04 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for v in _ticks(x0, x1, logx):
        if x0 - 1e-9 <= v <= x1 + 1e-9:
            lab = f"1e{int(v)}" if logx else f"{v:g}"
            out.append(f'<line x1="{px(v):.1f}" y1="{mt + ph}" x2="{px(v):.1f}" y2="{mt + ph + 5}" stroke="black"/>')
            out.append(f'<text x="{px(v):.1f}" y="{mt + ph + 18}" text-anchor="middle">{lab}</text>')
    for v in _ticks(y0, y1, logy):
        if y0 - 1e-9 <= v <= y1 + 1e-9:
            lab = f"1e{int(v)}" if logy else f"{v:g}"
            out.append(f'<line x1="{ml - 5}" y1="{py(v):.1f}" x2="{ml}" y2="{py(v):.1f}" stroke="black"/>')
            out.append(f'<text x="{ml - 8}" y="{py(v) + 4:.1f}" text-anchor="end">{lab}</text>')
    for i, (s, x, y) in enumerate(zip(series, xs, ys)):
        col = _COLORS[i % len(_COLORS)]
        if x.size:
            pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, y))
            dash = ' stroke-dasharray="6,4"' if s.dashed else ""
            out.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="1.6"{dash}/>')
            if s.markers:
                out.extend(f'<circle cx="{px(a):.1f}" cy="{py(b):.1f}" r="2.5" fill="{col}"/>' for a, b in zip(x, y))
        ly = mt + 16 + 16 * i
        out.append(f'<line x1="{ml + pw - 150}" y1="{ly - 4}" x2="{ml + pw - 125}" y2="{ly - 4}" stroke="{col}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw - 120}" y="{ly}">{_esc(s.label)}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 10}" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2}" text-anchor="middle" transform="rotate(-90 16 {mt + ph / 2})">'
               f'{_esc(ylabel)}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="22" text-anchor="middle" font-size="14">{_esc(title)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
