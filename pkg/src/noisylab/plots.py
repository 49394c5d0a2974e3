"""Minimal hand-written SVG line charts with standard-error bars."""

from __future__ import annotations

import math
from html import escape
from pathlib import Path

__all__ = ["line_chart", "accuracy_vs_eta", "f1_vs_pretrain_epochs"]

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
W, H = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 60, 130, 30, 50


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out, v = [], start
    while v <= hi + 1e-9 * step:
        out.append(round(v, 10))
        v += step
    return out


def line_chart(series: dict[str, list[tuple[float, float, float]]], title: str,
               xlabel: str, ylabel: str) -> str:
    """Render ``{name: [(x, mean, se), ...]}`` as an SVG document string."""
    pts = [p for s in series.values() for p in s if not math.isnan(p[1])]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] - p[2] for p in pts] + [p[1] + p[2] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    pad = 0.05 * (y1 - y0) or 1.0
    y0, y1 = y0 - pad, y1 + pad
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def sx(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return TOP + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{LEFT + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
           f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{sx(t):.1f}" y1="{TOP + ph}" x2="{sx(t):.1f}" y2="{TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.1f}" y="{TOP + ph + 16}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{LEFT - 4}" y1="{sy(t):.1f}" x2="{LEFT}" y2="{sy(t):.1f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 7}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text transform="translate(15 {TOP + ph / 2:.1f}) rotate(-90)" '
               f'text-anchor="middle">{escape(ylabel)}</text>')

    for k, (name, points) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        points = sorted(p for p in points if not math.isnan(p[1]))
        if points:
            path = " ".join(f"{sx(x):.1f},{sy(m):.1f}" for x, m, _ in points)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, m, se in points:
            cx = sx(x)
            if se > 0:
                out.append(f'<line x1="{cx:.1f}" y1="{sy(m - se):.1f}" x2="{cx:.1f}" '
                           f'y2="{sy(m + se):.1f}" stroke="{color}"/>')
                for yy in (m - se, m + se):
                    out.append(f'<line x1="{cx - 4:.1f}" y1="{sy(yy):.1f}" x2="{cx + 4:.1f}" '
                               f'y2="{sy(yy):.1f}" stroke="{color}"/>')
            out.append(f'<circle cx="{cx:.1f}" cy="{sy(m):.1f}" r="3" fill="{color}"/>')
        ly = TOP + 10 + 18 * k
        out.append(f'<line x1="{W - RIGHT + 12}" y1="{ly}" x2="{W - RIGHT + 32}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - RIGHT + 37}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _series(rows, experiment, xkey, metric):
    series: dict[str, list] = {}
    for r in rows:
        if r["experiment"] != experiment:
            continue
        series.setdefault(r["method"], []).append(
            (float(r[xkey]), float(r[f"{metric}_mean"]), float(r[f"{metric}_se"])))
    return series


def accuracy_vs_eta(summary_rows, path) -> str:
    svg = line_chart(_series(summary_rows, "main", "eta", "accuracy"),
                     "Clean-test accuracy vs noise rate", "noise rate", "accuracy (%)")
    Path(path).write_text(svg)
    return svg


def f1_vs_pretrain_epochs(summary_rows, path) -> str:
    svg = line_chart(_series(summary_rows, "duration", "pretrain_epochs", "f1"),
                     "Detection F1 vs pre-training epochs", "pre-training epochs", "F1")
    Path(path).write_text(svg)
    return svg
