"""Minimal native SVG line plots with optional shaded bands."""
from __future__ import annotations

import math
from html import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / n))
    for m in (1, 2, 5, 10):
        if (hi - lo) / (m * step) <= n:
            step *= m
            break
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def line_svg(series, title: str = "", xlabel: str = "t", ylabel: str = "", log_y: bool = False,
             width: int = 640, height: int = 400) -> str:
    """``series``: list of ``(label, x, mean, std_or_None)``. Bands show mean +/- std."""
    left, right, top, bottom = 70, 20, 30, 50
    pw, ph = width - left - right, height - top - bottom
    xs, ys = [], []
    cleaned = []
    for label, x, mean, std in series:
        x, mean = np.asarray(x, float), np.asarray(mean, float)
        std = np.zeros_like(mean) if std is None else np.nan_to_num(np.asarray(std, float))
        lo, hi = mean - std, mean + std
        if log_y:
            floor = np.nanmin(mean[mean > 0]) * 1e-3 if np.any(mean > 0) else 1e-300
            lo, mean, hi = (np.log10(np.maximum(v, floor)) for v in (lo, mean, hi))
        ok = np.isfinite(mean)
        cleaned.append((label, x[ok], mean[ok], lo[ok], hi[ok]))
        xs.append(x[ok])
        ys.extend([lo[ok], hi[ok]])
    allx = np.concatenate(xs) if xs else np.array([0.0, 1.0])
    ally = np.concatenate(ys) if ys else np.array([0.0, 1.0])
    x0, x1 = (float(allx.min()), float(allx.max())) if allx.size else (0.0, 1.0)
    y0, y1 = (float(ally.min()), float(ally.max())) if ally.size else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + (1 - (v - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for v in _ticks(x0, x1):
        out.append(f'<text x="{px(v):.1f}" y="{top + ph + 15}" text-anchor="middle">{v:g}</text>')
    for v in _ticks(y0, y1):
        lab = f"1e{v:g}" if log_y else f"{v:.4g}"
        out.append(f'<line x1="{left}" x2="{left + pw}" y1="{py(v):.1f}" y2="{py(v):.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 5}" y="{py(v) + 4:.1f}" text-anchor="end">{lab}</text>')
    for i, (label, x, mean, lo, hi) in enumerate(cleaned):
        color = PALETTE[i % len(PALETTE)]
        if x.size and np.any(hi > lo):
            pts = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, hi)] + [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[::-1], lo[::-1])]
            out.append(f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        if x.size:
            pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, mean))
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{left + pw - 5}" y="{top + 15 + 14 * i}" text-anchor="end" fill="{color}">{escape(str(label))}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{top + ph / 2}" text-anchor="middle" transform="rotate(-90 15 {top + ph / 2})">{escape(ylabel)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
