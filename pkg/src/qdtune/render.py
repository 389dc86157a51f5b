"""SVG drawing of a tuning trace over its diagram."""
from __future__ import annotations

import base64
import io
from xml.sax.saxutils import quoteattr

import numpy as np
from PIL import Image

from .diagram import StabilityDiagram

STAGE_COLORS = {
    "find_first": "#1f77b4",
    "slope_estimate": "#ff7f0e",
    "spacing_scan": "#2ca02c",
    "missed_line_check": "#d62728",
    "target_inference": "#9467bd",
}
SCALE = 3  # SVG units per pixel


def _heatmap_png(grid: np.ndarray) -> bytes:
    g = np.asarray(grid, dtype=float)
    lo, hi = float(g.min()), float(g.max())
    v = np.zeros_like(g) if hi == lo else (g - lo) / (hi - lo)
    # Row 0 is the lowest G2; images put row 0 on top.
    img = Image.fromarray(np.ascontiguousarray(np.flipud(np.round(v * 255).astype(np.uint8))))
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def render_trace(outcome, diagram: StabilityDiagram) -> str:
    """Heatmap, measured patches in order (colored by stage), label overlay and final point."""
    if not outcome.trace:
        raise ValueError("cannot render an empty trace")
    w, h = diagram.width, diagram.height
    W, H = w * SCALE, h * SCALE

    def px(g1, g2):
        x, y = diagram.to_pixel(g1, g2)
        return x * SCALE, (h - 1 - y) * SCALE

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
        f'width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f"<title>{diagram.id}</title>",
    ]
    png = base64.b64encode(_heatmap_png(diagram.grid)).decode("ascii")
    out.append(
        f'<image class="heatmap" x="0" y="0" width="{W}" height="{H}" preserveAspectRatio="none" '
        f'style="image-rendering:pixelated" xlink:href="data:image/png;base64,{png}"/>'
    )
    for line in diagram.lines:
        pts = " ".join("%.2f,%.2f" % px(*p) for p in line.polyline)
        out.append(f'<polyline class="label" points="{pts}" fill="none" stroke="#ffffff" stroke-width="1" stroke-dasharray="3,2"/>')
    for i, step in enumerate(outcome.trace):
        r = step.rect
        x = r.x * SCALE
        y = (h - r.y - r.side) * SCALE
        color = STAGE_COLORS.get(step.stage, "#7f7f7f")
        fill = {"line": 0.35, "unknown": 0.15}.get(step.outcome, 0.0)
        out.append(
            f'<rect class="step" data-index="{i}" data-stage={quoteattr(step.stage)} '
            f"data-outcome={quoteattr(step.outcome)} "
            f'x="{x}" y="{y}" width="{r.side * SCALE}" height="{r.side * SCALE}" '
            f'fill="{color}" fill-opacity="{fill}" stroke="{color}" stroke-width="1.5"/>'
        )
    fx, fy = px(*outcome.final_v)
    mark = "#00c000" if outcome.success else "#ff0000"
    out.append(f'<circle class="final" cx="{fx:.2f}" cy="{fy:.2f}" r="{2 * SCALE}" fill="{mark}" stroke="#000000"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
