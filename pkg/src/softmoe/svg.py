"""Dependency-free SVG heatmaps for alignment matrices.

Cells are colored on a diverging scale over [-1, 1]: -1 is ``#2166ac``
(blue), 0 is ``#f7f7f7`` (near white) and +1 is ``#b2182b`` (red), with
linear RGB interpolation in between. Values outside the range are clipped.
Every cell carries its value as a ``<title>`` tooltip.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

NEG = (0x21, 0x66, 0xAC)
MID = (0xF7, 0xF7, 0xF7)
POS = (0xB2, 0x18, 0x2B)


def color(value: float) -> str:
    v = float(np.clip(value, -1.0, 1.0))
    lo, hi, frac = (MID, POS, v) if v >= 0 else (MID, NEG, -v)
    rgb = [round(a + (b - a) * frac) for a, b in zip(lo, hi)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def read_matrix(path, header: bool = True) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if header:
        rows = rows[1:]
    rows = [r for r in rows if r]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(rows[0])
    out = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(f"{path}: row {i + 1} has {len(row)} cells, expected {width}")
        for j, cell in enumerate(row):
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise ValueError(f"{path}: non-numeric cell {cell!r} at row {i + 1}, column {j + 1}") from None
    return out


def heatmap_svg(matrix: np.ndarray, title: str = "", cell: int = 18) -> str:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2:
        raise ValueError("heatmap needs a 2-D matrix")
    m, n = matrix.shape
    left, top = 40, 30 if title else 12
    width = left + n * cell + 10
    height = top + m * cell + 30
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">'
    ]
    if title:
        parts.append(f'<text x="{left}" y="16" font-size="12">{title}</text>')
    for i in range(m):
        for j in range(n):
            v = matrix[i, j]
            parts.append(
                f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                f'fill="{color(v)}"><title>i={i + 1} j={j + 1}: {v:.4f}</title></rect>'
            )
    parts.append(f'<text x="{left + n * cell / 2}" y="{top + m * cell + 20}" text-anchor="middle">j</text>')
    parts.append(f'<text x="14" y="{top + m * cell / 2}" text-anchor="middle">i</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_heatmap(csv_path, out_path, title: str = "", header: bool = True) -> Path:
    """Render a numeric CSV as an SVG heatmap and return the output path."""
    matrix = read_matrix(csv_path, header)
    out = Path(out_path)
    out.write_text(heatmap_svg(matrix, title))
    return out
