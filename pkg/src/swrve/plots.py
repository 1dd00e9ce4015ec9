"""Static SVG coverage plots from simulation summary rows.

One panel per scenario, one marker per analysis, with a solid line at the
nominal level and dashed lines at nominal +/- 2 MCSE.
"""
from __future__ import annotations

import math
from html import escape
from pathlib import Path

__all__ = ["coverage_svg", "write_coverage_svg"]

PANEL_W, PANEL_H = 360, 220
MARGIN_L, MARGIN_B, MARGIN_T = 48, 70, 28


def _panel(rows, x0, y0, nominal, lo, hi):
    out = []
    title = "{generator} I={I} S={S} K={K} ({rho0}, {rho1})".format(**rows[0])
    out.append(f'<text x="{x0 + PANEL_W / 2}" y="{y0 + 16}" text-anchor="middle" font-size="12">{escape(title)}</text>')
    top, bottom = y0 + MARGIN_T, y0 + PANEL_H - MARGIN_B
    left, right = x0 + MARGIN_L, x0 + PANEL_W - 10
    n = [int(r["n_converged"]) for r in rows if r["n_converged"] not in ("", "NA")]
    n_ref = max(n) if n else 0
    band = 2 * math.sqrt(nominal * (1 - nominal) / n_ref) if n_ref else 0.0
    lo = max(0.0, min(lo, nominal - band - 0.02))  # keep the lower guide on the axis

    def ypos(v):
        return bottom - (v - lo) / (hi - lo) * (bottom - top)

    out.append(f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" fill="none" stroke="#888"/>')
    for tick in (lo, (lo + hi) / 2, hi):
        out.append(f'<text x="{left - 4}" y="{ypos(tick) + 4:.1f}" text-anchor="end" font-size="9">{100 * tick:.0f}</text>')
    out.append(f'<line x1="{left}" x2="{right}" y1="{ypos(nominal):.1f}" y2="{ypos(nominal):.1f}" stroke="#444"/>')
    for v in (nominal - band, nominal + band):
        if lo <= v <= hi:
            out.append(f'<line x1="{left}" x2="{right}" y1="{ypos(v):.1f}" y2="{ypos(v):.1f}" '
                       'stroke="#444" stroke-dasharray="4,3"/>')
    step = (right - left) / max(len(rows), 1)
    for i, r in enumerate(rows):
        x = left + (i + 0.5) * step
        label = f'{r["working_model"]} {r["variance_source"]}'
        out.append(f'<text transform="translate({x:.1f},{bottom + 6}) rotate(60)" font-size="8">{escape(label)}</text>')
        if r["coverage"] in ("", "NA"):
            continue
        cov = min(max(float(r["coverage"]), lo), hi)
        out.append(f'<circle cx="{x:.1f}" cy="{ypos(cov):.1f}" r="3" fill="#1f4e79"/>')
    return out


def coverage_svg(rows, nominal: float = 0.95, lo: float = 0.80, hi: float = 1.0, columns: int = 3) -> str:
    """Render summary rows (dicts keyed by the summary CSV header) as one SVG document."""
    blocks: dict = {}
    for r in rows:
        key = tuple(r[k] for k in ("generator", "I", "S", "K", "rho0", "rho1", "cac", "theta"))
        blocks.setdefault(key, []).append(r)
    panels = list(blocks.values())
    ncol = max(1, min(columns, len(panels)))
    nrow = max(1, math.ceil(len(panels) / ncol))
    width, height = ncol * PANEL_W, nrow * PANEL_H
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif">']
    for idx, block in enumerate(panels):
        parts.extend(_panel(block, (idx % ncol) * PANEL_W, (idx // ncol) * PANEL_H, nominal, lo, hi))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_coverage_svg(rows, path, **kw) -> None:
    Path(path).write_text(coverage_svg(rows, **kw))
