#!/usr/bin/env python3
"""Render a static SVG chart from the CSV artifacts the CLI emits.

Auto-detects the input flavour by header:

- ``scale,metric,mean,std`` (sweep.csv): line chart of mean vs scale with
  one polyline per metric and +-1 std whiskers.
- ``z_hat,z_true`` (exposure_scatter.csv): scatter of estimated vs true
  exposure with the y = x reference line.

No plotting dependency; the SVG is written by hand.  Examples:

    python3 scripts/plot_sweep.py runs/exp1/sweep/sweep.csv -o sweep.svg
    python3 scripts/plot_sweep.py runs/exp1/eval/exposure_scatter.csv \
        -o scatter.svg
"""

from __future__ import annotations

import argparse
import csv
from pathlib import Path

W, H = 640, 440
MARGIN = dict(left=64, right=160, top=24, bottom=48)
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#17becf"]

DEFAULT_METRICS = ["sqrt_pehe_de_out", "sqrt_pehe_se_out", "sqrt_pehe_te_out"]


def spans(lo: float, hi: float) -> tuple[float, float]:
    if hi <= lo:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


class Frame:
    """Maps data coordinates into the SVG plot rectangle."""

    def __init__(self, xlim: tuple[float, float], ylim: tuple[float, float]):
        self.x0, self.x1 = spans(*xlim)
        self.y0, self.y1 = spans(*ylim)

    def x(self, v: float) -> float:
        f = (v - self.x0) / (self.x1 - self.x0)
        return MARGIN["left"] + f * (W - MARGIN["left"] - MARGIN["right"])

    def y(self, v: float) -> float:
        f = (v - self.y0) / (self.y1 - self.y0)
        return H - MARGIN["bottom"] - f * (H - MARGIN["top"] - MARGIN["bottom"])


def ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def axes(out: list[str], fr: Frame, xlabel: str, ylabel: str) -> None:
    bx, by = fr.x(fr.x0), fr.y(fr.y0)
    tx, ty = fr.x(fr.x1), fr.y(fr.y1)
    out.append(f'<rect x="{bx:.1f}" y="{ty:.1f}" width="{tx - bx:.1f}" '
               f'height="{by - ty:.1f}" fill="none" stroke="#333"/>')
    for v in ticks(fr.x0, fr.x1):
        px = fr.x(v)
        out.append(f'<line x1="{px:.1f}" y1="{by:.1f}" x2="{px:.1f}" '
                   f'y2="{by + 5:.1f}" stroke="#333"/>')
        out.append(f'<text x="{px:.1f}" y="{by + 20:.1f}" font-size="11" '
                   f'text-anchor="middle">{v:.3g}</text>')
    for v in ticks(fr.y0, fr.y1):
        py = fr.y(v)
        out.append(f'<line x1="{bx - 5:.1f}" y1="{py:.1f}" x2="{bx:.1f}" '
                   f'y2="{py:.1f}" stroke="#333"/>')
        out.append(f'<text x="{bx - 9:.1f}" y="{py + 4:.1f}" font-size="11" '
                   f'text-anchor="end">{v:.3g}</text>')
    out.append(f'<text x="{(bx + tx) / 2:.1f}" y="{H - 10}" font-size="13" '
               f'text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="16" y="{(by + ty) / 2:.1f}" font-size="13" '
               f'text-anchor="middle" transform="rotate(-90 16 '
               f'{(by + ty) / 2:.1f})">{ylabel}</text>')


def render_sweep(rows: list[dict], metrics: list[str]) -> str:
    present = [m for m in metrics if any(r["metric"] == m for r in rows)]
    if not present:
        raise SystemExit(f"none of {metrics} found in the sweep table")
    pts = {m: sorted(((float(r["scale"]), float(r["mean"]), float(r["std"]))
                      for r in rows if r["metric"] == m))
           for m in present}
    xs = [p[0] for m in present for p in pts[m]]
    los = [p[1] - p[2] for m in present for p in pts[m]]
    his = [p[1] + p[2] for m in present for p in pts[m]]
    fr = Frame((min(xs), max(xs)), (min(los + [0.0]), max(his)))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'font-family="sans-serif">']
    axes(out, fr, "interference scale", "metric value")
    for color, m in zip(PALETTE, present):
        path = " ".join(f"{fr.x(x):.1f},{fr.y(y):.1f}" for x, y, _ in pts[m])
        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" '
                   f'stroke-width="1.8"/>')
        for x, y, s in pts[m]:
            px = fr.x(x)
            out.append(f'<line x1="{px:.1f}" y1="{fr.y(y - s):.1f}" '
                       f'x2="{px:.1f}" y2="{fr.y(y + s):.1f}" '
                       f'stroke="{color}" stroke-width="1"/>')
            out.append(f'<circle cx="{px:.1f}" cy="{fr.y(y):.1f}" r="3" '
                       f'fill="{color}"/>')
    ly = MARGIN["top"] + 8
    for color, m in zip(PALETTE, present):
        lx = W - MARGIN["right"] + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="1.8"/>')
        out.append(f'<text x="{lx + 24}" y="{ly + 4}" font-size="11">{m}</text>')
        ly += 18
    out.append("</svg>")
    return "\n".join(out)


def render_scatter(rows: list[dict]) -> str:
    zh = [float(r["z_hat"]) for r in rows]
    zt = [float(r["z_true"]) for r in rows]
    lo, hi = min(zh + zt), max(zh + zt)
    fr = Frame((lo, hi), (lo, hi))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'font-family="sans-serif">']
    axes(out, fr, "true exposure", "estimated exposure")
    out.append(f'<line x1="{fr.x(lo):.1f}" y1="{fr.y(lo):.1f}" '
               f'x2="{fr.x(hi):.1f}" y2="{fr.y(hi):.1f}" stroke="#999" '
               f'stroke-dasharray="4 3"/>')
    for zt_i, zh_i in zip(zt, zh):
        out.append(f'<circle cx="{fr.x(zt_i):.1f}" cy="{fr.y(zh_i):.1f}" '
                   f'r="2.2" fill="#1f77b4" fill-opacity="0.45"/>')
    out.append("</svg>")
    return "\n".join(out)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv_path", help="sweep.csv or exposure_scatter.csv")
    ap.add_argument("-o", "--out", required=True, help="output SVG path")
    ap.add_argument("--metrics", default=",".join(DEFAULT_METRICS),
                    help="comma-separated metric names for sweep input")
    args = ap.parse_args()

    with open(args.csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        rows = list(reader)
    if not rows:
        raise SystemExit(f"{args.csv_path} has no data rows")

    if set(fields) >= {"scale", "metric", "mean", "std"}:
        svg = render_sweep(rows, [m for m in args.metrics.split(",") if m])
    elif set(fields) >= {"z_hat", "z_true"}:
        svg = render_scatter(rows)
    else:
        raise SystemExit(f"unrecognised header {fields} in {args.csv_path}")

    Path(args.out).write_text(svg + "\n")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
