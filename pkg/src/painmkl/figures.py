"""Minimal SVG emitters for heatmaps and bar charts (no plotting dependency)."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

CELL = 16


def _grey(v: float) -> str:
    """Darker for larger ``v`` in [0, 1]."""
    level = int(round(255 * (1 - min(max(v, 0.0), 1.0))))
    return f"#{level:02x}{level:02x}{level:02x}"


def _header(width, height, comment):
    lines = ['<?xml version="1.0" encoding="UTF-8"?>']
    if comment:
        lines.append(f"<!-- {escape(comment)} -->")
    lines.append(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    )
    return lines


def heatmap_svg(values, row_labels=None, col_labels=None, title: str = "", comment: str = "",
                vmin: float | None = None, vmax: float | None = None) -> str:
    """One ``rect`` per matrix cell (class ``cell``), darker meaning larger."""
    V = np.atleast_2d(np.asarray(values, dtype=float))
    n_rows, n_cols = V.shape
    lo = float(V.min()) if vmin is None else vmin
    hi = float(V.max()) if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    left, top = 60, 30 if title else 10
    width, height = left + n_cols * CELL + 10, top + n_rows * CELL + 40
    out = _header(width, height, comment)
    if title:
        out.append(f'<text x="{left}" y="18" font-size="12">{escape(title)}</text>')
    for i in range(n_rows):
        if row_labels is not None:
            out.append(f'<text x="{left - 4}" y="{top + i * CELL + 12}" font-size="9" '
                       f'text-anchor="end">{escape(str(row_labels[i]))}</text>')
        for j in range(n_cols):
            out.append(
                f'<rect class="cell" x="{left + j * CELL}" y="{top + i * CELL}" width="{CELL}" '
                f'height="{CELL}" fill="{_grey((V[i, j] - lo) / span)}"><title>{V[i, j]:.4g}</title></rect>'
            )
    if col_labels is not None:
        for j, lab in enumerate(col_labels):
            x, y = left + j * CELL + CELL / 2, top + n_rows * CELL + 10
            out.append(f'<text x="{x}" y="{y}" font-size="8" text-anchor="start" '
                       f'transform="rotate(60 {x} {y})">{escape(str(lab))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_svg(values, labels, title: str = "", comment: str = "") -> str:
    """Vertical bars (class ``bar``) scaled to the largest value."""
    v = np.asarray(values, dtype=float)
    top, base, bar_w = 30, 150, 40
    width = 20 + len(v) * (bar_w + 10)
    out = _header(width, base + 40, comment)
    if title:
        out.append(f'<text x="10" y="18" font-size="12">{escape(title)}</text>')
    peak = float(v.max()) if v.size and v.max() > 0 else 1.0
    for i, (val, lab) in enumerate(zip(v, labels)):
        h = (base - top) * max(val, 0.0) / peak
        x = 10 + i * (bar_w + 10)
        out.append(f'<rect class="bar" x="{x}" y="{base - h:.2f}" width="{bar_w}" height="{h:.2f}" '
                   f'fill="#444444"><title>{val:.4g}</title></rect>')
        out.append(f'<text x="{x + bar_w / 2}" y="{base + 14}" font-size="9" '
                   f'text-anchor="middle">{escape(str(lab))}</text>')
        out.append(f'<text x="{x + bar_w / 2}" y="{base + 28}" font-size="9" '
                   f'text-anchor="middle">{val:.3f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
