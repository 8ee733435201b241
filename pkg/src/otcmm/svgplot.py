"""Minimal static SVG charts with byte-stable output."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .csvio import numeric_column, read_csv
from .kde import kde

WIDTH, HEIGHT = 640, 400
MARGIN = (60, 20, 30, 50)  # left, right, top, bottom
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _num(v: float) -> str:
    return f"{v:.2f}"


def _label(v: float) -> str:
    return f"{v:.4g}"


class _Frame:
    def __init__(self, xlo, xhi, ylo, yhi):
        if xhi <= xlo:
            xlo, xhi = xlo - 0.5, xhi + 0.5
        if yhi <= ylo:
            ylo, yhi = ylo - 0.5, yhi + 0.5
        self.xlo, self.xhi, self.ylo, self.yhi = xlo, xhi, ylo, yhi
        left, right, top, bottom = MARGIN
        self.px0, self.px1 = left, WIDTH - right
        self.py0, self.py1 = HEIGHT - bottom, top

    def x(self, v):
        return self.px0 + (v - self.xlo) / (self.xhi - self.xlo) * (self.px1 - self.px0)

    def y(self, v):
        return self.py0 + (v - self.ylo) / (self.yhi - self.ylo) * (self.py1 - self.py0)

    def axes(self, title: str, xlabel: str, ylabel: str) -> list[str]:
        out = [
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<line x1="{self.px0}" y1="{self.py0}" x2="{self.px1}" y2="{self.py0}" stroke="black"/>',
            f'<line x1="{self.px0}" y1="{self.py0}" x2="{self.px0}" y2="{self.py1}" stroke="black"/>',
        ]
        for v in np.linspace(self.xlo, self.xhi, 5):
            px = _num(self.x(v))
            out.append(f'<text x="{px}" y="{self.py0 + 16}" font-size="10" text-anchor="middle">{_label(v)}</text>')
        for v in np.linspace(self.ylo, self.yhi, 5):
            py = _num(self.y(v))
            out.append(f'<text x="{self.px0 - 4}" y="{py}" font-size="10" text-anchor="end">{_label(v)}</text>')
        out.append(f'<text x="{WIDTH / 2}" y="16" font-size="13" text-anchor="middle">{escape(title)}</text>')
        out.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 8}" font-size="11" text-anchor="middle">{escape(xlabel)}</text>')
        out.append(
            f'<text x="14" y="{HEIGHT / 2}" font-size="11" text-anchor="middle" '
            f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>'
        )
        return out


def _document(body: list[str]) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">'
    return "\n".join([head, *body, "</svg>"]) + "\n"


def line_svg(x, series: dict[str, np.ndarray], title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    x = np.asarray(x, dtype=float)
    if x.size == 0 or not series:
        raise ValueError("nothing to plot: empty series")
    ys = {k: np.asarray(v, dtype=float) for k, v in series.items()}
    if any(v.shape != x.shape for v in ys.values()):
        raise ValueError("every series must match the x column length")
    allv = np.concatenate(list(ys.values()))
    f = _Frame(float(x.min()), float(x.max()), float(allv.min()), float(allv.max()))
    body = f.axes(title, xlabel, ylabel)
    for i, (name, y) in enumerate(ys.items()):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{_num(f.x(a))},{_num(f.y(b))}" for a, b in zip(x, y))
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        body.append(
            f'<text x="{f.px1 - 4}" y="{f.py1 + 14 * (i + 1)}" font-size="10" text-anchor="end" '
            f'fill="{color}">{escape(name)}</text>'
        )
    return _document(body)


def histogram_kde_svg(values, title: str = "", xlabel: str = "", bins: int = 20) -> str:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("nothing to plot: empty series")
    counts, edges = np.histogram(v, bins=bins)
    widths = np.diff(edges)
    heights = counts / (v.size * widths)
    est = kde(v)
    f = _Frame(
        float(min(edges[0], est.points[0])),
        float(max(edges[-1], est.points[-1])),
        0.0,
        float(max(heights.max(), est.density.max())) * 1.05,
    )
    body = f.axes(title, xlabel, "density")
    for h, a, b in zip(heights, edges[:-1], edges[1:]):
        x0, x1, y0 = f.x(a), f.x(b), f.y(h)
        body.append(
            f'<rect x="{_num(x0)}" y="{_num(y0)}" width="{_num(x1 - x0)}" height="{_num(f.py0 - y0)}" '
            f'fill="#aec7e8" stroke="#1f77b4"/>'
        )
    pts = " ".join(f"{_num(f.x(a))},{_num(f.y(b))}" for a, b in zip(est.points, est.density))
    body.append(f'<polyline fill="none" stroke="#d62728" stroke-width="1.5" points="{pts}"/>')
    return _document(body)


def emit_plot(csv_path, kind: str, out_path, column: str | None = None, title: str | None = None) -> Path:
    """Render a CSV as ``line`` (first column against the rest) or ``histogram+kde``."""
    _, header, rows = read_csv(csv_path)
    if not rows:
        raise ValueError(f"{csv_path}: no data rows to plot")
    title = title if title is not None else Path(csv_path).stem
    if kind == "line":
        if len(header) < 2:
            raise ValueError("a line plot needs an x column and at least one y column")
        _, x = numeric_column(header, rows, header[0])
        series = {}
        names = [column] if column else header[1:]
        for name in names:
            try:
                series[name] = numeric_column(header, rows, name)[1]
            except ValueError:
                if column:
                    raise
        svg = line_svg(x, series, title, header[0], "")
    elif kind == "histogram+kde":
        name, vals = numeric_column(header, rows, column)
        svg = histogram_kde_svg(vals, title, name)
    else:
        raise ValueError(f"unknown plot kind {kind!r}; use 'line' or 'histogram+kde'")
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    return out
