"""Deterministic SVG charts: score histograms and TAR-versus-level curves.

Output depends only on the input numbers. Coordinates are printed with a
fixed number of decimals and no timestamps or random ids are emitted.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .evaluation import HIST_BINS, SCORE_LABELS, ScoreSet

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 170, 30, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _n(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


class _Plot:
    def __init__(self, title: str, xlabel: str, ylabel: str, xmax: float, ymax: float, xmin: float = 0.0):
        self.xmin, self.xmax, self.ymax = xmin, xmax, ymax if ymax > 0 else 1.0
        self.w = WIDTH - MARGIN_L - MARGIN_R
        self.h = HEIGHT - MARGIN_T - MARGIN_B
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2 - MARGIN_R / 2:.0f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
            f'<text x="{MARGIN_L + self.w / 2:.0f}" y="{HEIGHT - 10}" text-anchor="middle">{_esc(xlabel)}</text>',
            f'<text x="14" y="{MARGIN_T + self.h / 2:.0f}" text-anchor="middle" '
            f'transform="rotate(-90 14 {MARGIN_T + self.h / 2:.0f})">{_esc(ylabel)}</text>',
        ]
        self.legend = 0

    def x(self, v: float) -> float:
        return MARGIN_L + (v - self.xmin) / (self.xmax - self.xmin) * self.w

    def y(self, v: float) -> float:
        return MARGIN_T + self.h - v / self.ymax * self.h

    def axes(self, xticks: Sequence[float], yticks: Sequence[float], xfmt: str = "{:g}", yfmt: str = "{:g}") -> None:
        x0, y0 = MARGIN_L, MARGIN_T + self.h
        self.parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + self.w}" y2="{y0}" stroke="black"/>')
        self.parts.append(f'<line x1="{x0}" y1="{MARGIN_T}" x2="{x0}" y2="{y0}" stroke="black"/>')
        for t in xticks:
            px = _n(self.x(t))
            self.parts.append(f'<line x1="{px}" y1="{y0}" x2="{px}" y2="{y0 + 4}" stroke="black"/>')
            self.parts.append(f'<text x="{px}" y="{y0 + 16}" text-anchor="middle">{xfmt.format(t)}</text>')
        for t in yticks:
            py = _n(self.y(t))
            self.parts.append(f'<line x1="{x0 - 4}" y1="{py}" x2="{x0}" y2="{py}" stroke="black"/>')
            self.parts.append(f'<text x="{x0 - 6}" y="{py}" text-anchor="end" dy="4">{yfmt.format(t)}</text>')

    def add_legend(self, label: str, color: str) -> None:
        lx = WIDTH - MARGIN_R + 12
        ly = MARGIN_T + 10 + 18 * self.legend
        self.parts.append(f'<rect x="{lx}" y="{ly - 8}" width="12" height="8" fill="{color}"/>')
        self.parts.append(f'<text x="{lx + 18}" y="{ly}">{_esc(label)}</text>')
        self.legend += 1

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _nice_ticks(vmax: float, count: int = 5) -> list[float]:
    if vmax <= 0:
        return [0.0]
    raw = vmax / count
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    return [float(i * step) for i in range(int(vmax // step) + 1)]


def histogram_svg(sets: Mapping[str, ScoreSet], imposter_scale: float = 0.1, title: str = "Similarity scores") -> str:
    """Step histograms of the score sets over 100 bins on [0, 1].

    Imposter frequencies are multiplied by `imposter_scale` for display only.
    """
    order = [k for k in SCORE_LABELS if k in sets] + sorted(k for k in sets if k not in SCORE_LABELS)
    series = []
    for label in order:
        s = sets[label]
        h = s.histogram.astype(float)
        freq = h / max(len(s.scores), 1)
        if label.startswith("imposter"):
            freq = freq * imposter_scale
        series.append((label, freq))
    ymax = max((float(f.max()) for _, f in series), default=1.0) * 1.05
    p = _Plot(title, "normalized score", "relative frequency", 1.0, ymax)
    p.axes([i / 5 for i in range(6)], _nice_ticks(ymax), "{:.1f}", "{:.3g}")
    for idx, (label, freq) in enumerate(series):
        color = PALETTE[idx % len(PALETTE)]
        dash = ' stroke-dasharray="4 2"' if label.endswith("perturbed") and "unperturbed" not in label else ""
        pts = []
        for b in range(HIST_BINS):
            y = _n(p.y(freq[b]))
            pts.append(f"{_n(p.x(b / HIST_BINS))},{y}")
            pts.append(f"{_n(p.x((b + 1) / HIST_BINS))},{y}")
        p.parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2"{dash} points="{" ".join(pts)}"/>')
        shown = label + (f" (x{imposter_scale:g})" if label.startswith("imposter") and imposter_scale != 1 else "")
        p.add_legend(shown, color)
    return p.render()


def tar_curve_svg(curves: Mapping[str, Sequence[tuple[int, float]]], title: str = "TAR at FAR = 0.01%") -> str:
    """One polyline of (level, TAR) per technique, in sorted technique order."""
    levels = sorted({lv for c in curves.values() for lv, _ in c}) or [0, 1]
    lo, hi = min(levels), max(levels)
    if lo == hi:
        hi = lo + 1
    p = _Plot(title, "perturbation level", "TAR", hi, 1.05, xmin=lo)
    p.axes(list(range(lo, hi + 1)), [i / 5 for i in range(6)], "{:d}", "{:.1f}")
    for idx, name in enumerate(sorted(curves)):
        color = PALETTE[idx % len(PALETTE)]
        pts = sorted(curves[name])
        coords = " ".join(f"{_n(p.x(lv))},{_n(p.y(t))}" for lv, t in pts)
        p.parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        for lv, t in pts:
            p.parts.append(f'<circle cx="{_n(p.x(lv))}" cy="{_n(p.y(t))}" r="2.5" fill="{color}"/>')
        p.add_legend(name, color)
    return p.render()
