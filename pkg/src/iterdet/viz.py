"""SVG overlays of iterative detections."""

from __future__ import annotations

import base64
import io
from typing import Sequence
from xml.sax.saxutils import quoteattr

import numpy as np
from PIL import Image

from .geometry import ScoredBox
from .synthetic import to_uint8

MIN_DRAW_SCORE = 0.1
BOX_CLASS = "det"
ITERATION_COLORS = {1: "#00c800", 2: "#ffd700"}
# cyan, magenta, orange-red, blue, violet, pink, teal, white; cycled beyond
LATER_COLORS = ("#00e5ff", "#ff00ff", "#ff4500", "#3060ff", "#9b30ff", "#ff8fb0", "#008080",
                "#ffffff")


def iteration_color(iteration: int) -> str:
    """Green for the first pass, yellow for the second, then hues away from both."""
    if iteration in ITERATION_COLORS:
        return ITERATION_COLORS[iteration]
    return LATER_COLORS[(iteration - 3) % len(LATER_COLORS)]


def _png_base64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def render_svg(image: np.ndarray, detections: Sequence[ScoredBox],
               min_score: float = MIN_DRAW_SCORE, scale: int = 4) -> str:
    """SVG with the image as background and one ``rect`` per detection with score >= ``min_score``.

    Each rect has class ``det iter-<t>`` and ``data-iteration``/``data-score``
    attributes; the outline covers the inclusive pixel block of the box.
    """
    _, h, w = image.shape
    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{w * scale}" height="{h * scale}" viewBox="-0.5 -0.5 {w} {h}">',
        f'<image x="-0.5" y="-0.5" width="{w}" height="{h}" style="image-rendering:pixelated" '
        f'href="data:image/png;base64,{_png_base64(image)}"/>',
    ]
    for d in detections:
        if d.score < min_score:
            continue
        b = d.box
        parts.append(
            f'<rect class="{BOX_CLASS} iter-{d.iteration}" data-iteration="{d.iteration}" '
            f'data-score="{d.score:.4f}" x="{b.x - 0.5:g}" y="{b.y - 0.5:g}" '
            f'width="{b.w + 1:g}" height="{b.h + 1:g}" fill="none" '
            f'stroke="{iteration_color(d.iteration)}" stroke-width="0.4">'
            f"<title>{quoteattr(f'iteration {d.iteration}, score {d.score:.3f}')[1:-1]}</title>"
            "</rect>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
