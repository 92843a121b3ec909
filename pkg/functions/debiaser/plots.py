import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence
from xml.sax.saxutils import escape

from .reports import atomic_write

logger = logging.getLogger(__name__)

WIDTH, HEIGHT = 640, 400
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 70, 150, 40, 55
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
TICKS = 5


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    sd: Optional[Sequence[float]] = None


def _validate(series: List[Series]):
    if not series:
        raise ValueError("emit_svg_line_chart needs at least one series")
    for s in series:
        if len(s.x) < 2 or len(s.x) != len(s.y):
            raise ValueError(f"Series {s.label!r} needs at least 2 (x, y) points of equal count")
        if s.sd is not None and len(s.sd) != len(s.y):
            raise ValueError(f"Series {s.label!r}: sd length does not match y")
        values = list(s.x) + list(s.y) + list(s.sd or [])
        if any(not math.isfinite(float(v)) for v in values):
            raise ValueError(f"Series {s.label!r} contains NaN or Inf")


def _range(lo: float, hi: float):
    if hi - lo < 1e-12:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def render_svg_line_chart(series: List[Series], title: str = "", x_label: str = "", y_label: str = "") -> str:
    _validate(series)
    xs = [float(v) for s in series for v in s.x]
    lows = [float(y) - float(sd) for s in series for y, sd in zip(s.y, s.sd or [0.0] * len(s.y))]
    highs = [float(y) + float(sd) for s in series for y, sd in zip(s.y, s.sd or [0.0] * len(s.y))]
    x_lo, x_hi = _range(min(xs), max(xs))
    y_lo, y_hi = _range(min(lows), max(highs))

    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def px(x: float) -> float:
        return MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y: float) -> float:
        return MARGIN_TOP + (y_hi - y) / (y_hi - y_lo) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.2f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]

    # axes and ticks
    x0, y0 = MARGIN_LEFT, MARGIN_TOP + plot_h
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + plot_w}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{MARGIN_TOP}" x2="{x0}" y2="{y0}" stroke="black"/>')
    for i in range(TICKS + 1):
        xv = x_lo + (x_hi - x_lo) * i / TICKS
        yv = y_lo + (y_hi - y_lo) * i / TICKS
        out.append(f'<line x1="{px(xv):.2f}" y1="{y0}" x2="{px(xv):.2f}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{px(xv):.2f}" y="{y0 + 18}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<line x1="{x0 - 5}" y1="{py(yv):.2f}" x2="{x0}" y2="{py(yv):.2f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{py(yv) + 4:.2f}" text-anchor="end">{yv:.3g}</text>')
    out.append(f'<text x="{x0 + plot_w / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(
        f'<text x="18" y="{MARGIN_TOP + plot_h / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {MARGIN_TOP + plot_h / 2:.2f})">{escape(y_label)}</text>'
    )

    for k, s in enumerate(series):
        color = COLORS[k % len(COLORS)]
        points = [(float(x), float(y)) for x, y in zip(s.x, s.y)]
        if s.sd is not None:
            upper = [(x, y + float(sd)) for (x, y), sd in zip(points, s.sd)]
            lower = [(x, y - float(sd)) for (x, y), sd in zip(points, s.sd)]
            band = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in upper + lower[::-1])
            out.append(f'<polygon points="{band}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in points)
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = MARGIN_TOP + 10 + 18 * k
        lx = WIDTH - MARGIN_RIGHT + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}">{escape(s.label)}</text>')

    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_svg_line_chart(
    series: List[Series], path: str, title: str = "", x_label: str = "", y_label: str = ""
):
    """Write a standalone SVG line chart; series with `sd` get a shaded
    +-1 sd band. Output is byte-identical for identical input."""
    atomic_write(path, render_svg_line_chart(series, title, x_label, y_label))
    logger.info(f"Wrote chart {path}")
