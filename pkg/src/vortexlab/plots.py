"""Deterministic SVG output: training diagnostics and qualitative scan renders.

Coordinates are printed with fixed precision and nothing time-dependent is
embedded, so identical inputs give identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

PORT_COLOR = "#2ca02c"  # green
STARBOARD_COLOR = "#ff7f0e"  # orange
CURVE_COLORS = {"alignment": "#1f77b4", "uniformity": "#d62728", "loss": "#333333"}

WIDTH, HEIGHT, MARGIN = 640, 360, 48


def _f(x: float) -> str:
    return f"{x:.2f}"


def _header(width: int, height: int) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]


def _scale(lo: float, hi: float, a: float, b: float):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (np.asarray(v, dtype=float) - lo) / span * (b - a)


def _axes(x0, y0, x1, y1, xlabel, ylabel, xr, yr) -> list[str]:
    out = [
        f'<line x1="{_f(x0)}" y1="{_f(y1)}" x2="{_f(x1)}" y2="{_f(y1)}" stroke="black"/>',
        f'<line x1="{_f(x0)}" y1="{_f(y0)}" x2="{_f(x0)}" y2="{_f(y1)}" stroke="black"/>',
        f'<text x="{_f((x0 + x1) / 2)}" y="{_f(y1 + 30)}" text-anchor="middle">{xlabel}</text>',
        f'<text x="{_f(x0 - 36)}" y="{_f((y0 + y1) / 2)}" text-anchor="middle" '
        f'transform="rotate(-90 {_f(x0 - 36)} {_f((y0 + y1) / 2)})">{ylabel}</text>',
        f'<text x="{_f(x0)}" y="{_f(y1 + 14)}" text-anchor="middle">{xr[0]:.4g}</text>',
        f'<text x="{_f(x1)}" y="{_f(y1 + 14)}" text-anchor="middle">{xr[1]:.4g}</text>',
        f'<text x="{_f(x0 - 4)}" y="{_f(y1)}" text-anchor="end">{yr[0]:.4g}</text>',
        f'<text x="{_f(x0 - 4)}" y="{_f(y0 + 8)}" text-anchor="end">{yr[1]:.4g}</text>',
    ]
    return out


def metric_curves_svg(rows: Sequence[dict], kind: str = "align-uniform", split: str = "val") -> str:
    """Per-epoch curves from metric-log rows.

    ``align-uniform`` draws alignment and uniformity in two side-by-side panels
    (one polyline each); ``loss`` draws the InfoNCE loss of ``split``.
    """
    rows = [r for r in rows if r["split"] == split]
    if not rows:
        raise ValueError(f"no metric rows for split {split!r}")
    names = {"align-uniform": ("alignment", "uniformity"), "loss": ("loss",)}.get(kind)
    if names is None:
        raise ValueError(f"unknown plot kind {kind!r}")
    rows = sorted(rows, key=lambda r: r["epoch"])
    epochs = np.array([r["epoch"] for r in rows], dtype=float)
    out = _header(WIDTH, HEIGHT)
    panel_w = (WIDTH - MARGIN) / len(names)
    for k, name in enumerate(names):
        vals = np.array([r[name] for r in rows], dtype=float)
        x0 = MARGIN + k * panel_w + 8
        x1 = x0 + panel_w - MARGIN
        y0, y1 = MARGIN / 2, HEIGHT - MARGIN
        xr = (epochs.min(), epochs.max())
        yr = (vals.min(), vals.max())
        sx, sy = _scale(*xr, x0, x1), _scale(*yr, y1, y0)
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(sx(epochs), sy(vals)))
        out += _axes(x0, y0, x1, y1, "epoch", name, xr, yr)
        out.append(f'<polyline fill="none" stroke="{CURVE_COLORS[name]}" stroke-width="2" points="{pts}"/>')
        out.append(f'<text x="{_f(x1)}" y="{_f(y0)}" text-anchor="end" fill="{CURVE_COLORS[name]}">{name} ({split})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _cross(x: float, y: float, color: str, size: float = 7.0) -> str:
    return (
        f'<g class="cross" stroke="{color}" stroke-width="3">'
        f'<line x1="{_f(x - size)}" y1="{_f(y - size)}" x2="{_f(x + size)}" y2="{_f(y + size)}"/>'
        f'<line x1="{_f(x - size)}" y1="{_f(y + size)}" x2="{_f(x + size)}" y2="{_f(y - size)}"/></g>'
    )


def render_scan_svg(points: np.ndarray, truth: np.ndarray | None = None, pred: np.ndarray | None = None, title: str = "") -> str:
    """One RHI frame: points colored by radial velocity, true centers as
    circles and predicted centers as crosses (port green, starboard orange)."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] == 0 or points.shape[1] != 3:
        raise ValueError("render needs a non-empty (N, 3) frame")
    marks = [np.asarray(c, dtype=float).reshape(2, 2) for c in (truth, pred) if c is not None]
    allxy = np.vstack([points[:, :2], *marks])
    lo, hi = allxy.min(axis=0), allxy.max(axis=0)
    pad = 0.05 * np.maximum(hi - lo, 1.0)
    lo, hi = lo - pad, hi + pad
    # equal aspect: one scale for both axes
    scale = min((WIDTH - 2 * MARGIN) / (hi[0] - lo[0]), (HEIGHT - 2 * MARGIN) / (hi[1] - lo[1]))

    def to_px(xy):
        xy = np.atleast_2d(xy)
        return np.column_stack([MARGIN + (xy[:, 0] - lo[0]) * scale, HEIGHT - MARGIN - (xy[:, 1] - lo[1]) * scale])

    vmax = max(float(np.abs(points[:, 2]).max()), 1e-9)
    out = _header(WIDTH, HEIGHT)
    out += _axes(MARGIN, MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, "y (m)", "z (m)", (lo[0], hi[0]), (lo[1], hi[1]))
    if title:
        out.append(f'<text x="{WIDTH / 2:.0f}" y="16" text-anchor="middle">{title}</text>')
    out.append('<g class="points">')
    for (px, py), v in zip(to_px(points[:, :2]), points[:, 2]):
        t = v / vmax  # red for positive, blue for negative radial velocity
        r = int(255 * (0.5 + 0.5 * max(t, 0))) if t >= 0 else int(255 * (0.5 + 0.5 * t))
        b = int(255 * (0.5 - 0.5 * min(t, 0))) if t <= 0 else int(255 * (0.5 - 0.5 * t))
        out.append(f'<rect x="{_f(px - 1)}" y="{_f(py - 1)}" width="2" height="2" fill="rgb({r},128,{b})"/>')
    out.append("</g>")
    colors = (PORT_COLOR, STARBOARD_COLOR)
    if truth is not None:
        for (px, py), c in zip(to_px(np.asarray(truth).reshape(2, 2)), colors):
            out.append(f'<circle cx="{_f(px)}" cy="{_f(py)}" r="9" fill="none" stroke="{c}" stroke-width="3"/>')
    if pred is not None:
        for (px, py), c in zip(to_px(np.asarray(pred).reshape(2, 2)), colors):
            out.append(_cross(px, py, c))
    out.append(f'<text x="{WIDTH - MARGIN}" y="{MARGIN - 18}" text-anchor="end" fill="{PORT_COLOR}">port</text>')
    out.append(f'<text x="{WIDTH - MARGIN}" y="{MARGIN - 6}" text-anchor="end" fill="{STARBOARD_COLOR}">starboard</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path: Path, svg: str) -> Path:
    path = Path(path)
    path.write_text(svg)
    return path
