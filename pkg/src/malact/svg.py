"""Minimal deterministic SVG charts (no timestamps, no random ids)."""

from __future__ import annotations

from html import escape
from typing import Optional, Sequence

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")
WIDTH, HEIGHT, MARGIN = 640, 400, 48


def _header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]


def _scale(values: Sequence[float], lo_px: float, hi_px: float):
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    return lambda v: lo_px + (v - lo) / (hi - lo) * (hi_px - lo_px)


def scatter(
    xs: Sequence[float],
    ys: Sequence[float],
    groups: Sequence[int],
    labels: Optional[Sequence[str]] = None,
    title: str = "",
) -> str:
    """Scatter plot; group -1 is drawn grey, labelled points get a text tag."""
    sx = _scale(xs, MARGIN, WIDTH - MARGIN)
    sy = _scale(ys, HEIGHT - MARGIN, MARGIN)
    out = _header(title)
    for i, (x, y, g) in enumerate(zip(xs, ys, groups)):
        color = "#bbbbbb" if g < 0 else PALETTE[g % len(PALETTE)]
        out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
        if labels and labels[i]:
            out.append(
                f'<text x="{sx(x) + 4:.2f}" y="{sy(y) - 4:.2f}" font-size="9">{escape(labels[i])}</text>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bars(
    positions: Sequence[float],
    series: dict[str, Sequence[float]],
    title: str = "",
    width: Optional[float] = None,
) -> str:
    """Grouped vertical bars; ``series`` maps a legend name to heights."""
    heights = [h for hs in series.values() for h in hs] or [0.0]
    lo_h, hi_h = min(0.0, min(heights)), max(0.0, max(heights))
    sx = _scale(list(positions) + [max(positions, default=0) + (width or 1)], MARGIN, WIDTH - MARGIN)
    sy = _scale([lo_h, hi_h], HEIGHT - MARGIN, MARGIN)
    step = width or (min((b - a for a, b in zip(positions, positions[1:])), default=1) or 1)
    bar_px = max(0.5, (sx(step) - sx(0)) / max(1, len(series)))
    out = _header(title)
    zero = sy(0.0)
    out.append(f'<line x1="{MARGIN}" y1="{zero:.2f}" x2="{WIDTH - MARGIN}" y2="{zero:.2f}" stroke="black"/>')
    for k, (name, hs) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        out.append(
            f'<text x="{WIDTH - MARGIN:.1f}" y="{MARGIN + 12 * k:.1f}" text-anchor="end" '
            f'font-size="10" fill="{color}">{escape(name)}</text>'
        )
        for p, h in zip(positions, hs):
            if h == 0:
                continue
            top = min(sy(h), zero)
            out.append(
                f'<rect x="{sx(p) + k * bar_px:.2f}" y="{top:.2f}" width="{bar_px:.2f}" '
                f'height="{abs(sy(h) - zero):.2f}" fill="{color}"/>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"
