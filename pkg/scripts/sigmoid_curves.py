"""Tabulate and plot the gate cross moment over the correlation grid.

Writes ``sigmoid_curves.csv`` and ``sigmoid_curves.svg`` into ``--out`` and
prints the ``cs0/cs1`` ratio.
"""

import argparse
from pathlib import Path

import numpy as np

from softmoe.experiment import write_csv
from softmoe.hermite import assumption_sigmoid_check, cs_ratio_check, default_grid


def line_svg(x, y, title, width=480, height=300, pad=40) -> str:
    x, y = np.asarray(x), np.asarray(y)
    lo, hi = min(y.min(), 0.0), max(y.max(), 0.0)
    hi = hi if hi > lo else lo + 1.0

    def px(a):
        return pad + (a - x[0]) / (x[-1] - x[0]) * (width - 2 * pad)

    def py(b):
        return height - pad - (b - lo) / (hi - lo) * (height - 2 * pad)

    pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, y))
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{py(0):.1f}" x2="{width - pad}" y2="{py(0):.1f}" stroke="#999"/>',
        f'<polyline points="{pts}" fill="none" stroke="#b2182b" stroke-width="2"/>',
        f'<text x="{pad}" y="{height - 10}" font-size="11">rho = {x[0]:g}</text>',
        f'<text x="{width - pad}" y="{height - 10}" font-size="11" text-anchor="end">rho = {x[-1]:g}</text>',
        f'<text x="5" y="{py(hi):.1f}" font-size="11">{hi:.3g}</text>',
        f'<text x="5" y="{py(lo):.1f}" font-size="11">{lo:.3g}</text>',
        "</svg>",
    ]) + "\n"


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", type=Path, default=Path("runs/sigmoid"))
    ap.add_argument("--points", type=int, default=201)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    series = assumption_sigmoid_check(default_grid(args.points))
    quad = assumption_sigmoid_check(default_grid(args.points), method="quadrature")
    write_csv(args.out / "sigmoid_curves.csv", ["rho", "series", "quadrature"],
              zip(series.grid, series.values, quad.values))
    (args.out / "sigmoid_curves.svg").write_text(line_svg(series.grid, series.values, "gate cross moment"))
    ratio = cs_ratio_check()
    print(f"max cross moment {series.max_value:.6g} (pass {series.passed})")
    print(f"max series/quadrature gap {np.abs(series.values - quad.values).max():.2e}")
    print(f"cs0 {ratio.cs0:.6g}  cs1 {ratio.cs1:.6g}  ratio {ratio.ratio:.4f} (pass {ratio.passed})")


if __name__ == "__main__":
    main()
