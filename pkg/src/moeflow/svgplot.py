"""Hand-rolled SVG scatter and trajectory panels.

No plotting dependency: figures are assembled from literal SVG elements
with coordinates formatted to two decimals, so identical inputs always
produce identical bytes. Samples render as circles, reference data as
small squares, trajectories as polylines colored by expert id.
"""

from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .errors import ValidationError

PALETTE = (
    "#4269d0", "#efb118", "#ff725c", "#6cc5b0",
    "#3ca951", "#ff8ab7", "#a463f2", "#97bbf5",
)
REFERENCE_COLOR = "#9a9a9a"
SAMPLE_COLOR = "#2a6fb0"


@dataclass(frozen=True)
class Canvas:
    """Panel geometry and the data window mapped onto it."""

    panel_size: int = 320
    margin: int = 28
    x_range: tuple = (-3.0, 3.0)
    y_range: tuple = (-3.0, 3.0)

    def __post_init__(self):
        if self.panel_size < 32 or self.margin < 0:
            raise ValidationError("canvas panel too small")
        if self.x_range[0] >= self.x_range[1] or self.y_range[0] >= self.y_range[1]:
            raise ValidationError("canvas ranges must be increasing")


@dataclass
class Panel:
    title: str
    elements: list


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _project(canvas: Canvas, points: np.ndarray) -> np.ndarray:
    """Data coordinates to panel-local pixels; y axis points up."""
    (x0, x1), (y0, y1) = canvas.x_range, canvas.y_range
    s = canvas.panel_size
    px = (points[:, 0] - x0) / (x1 - x0) * s
    py = s - (points[:, 1] - y0) / (y1 - y0) * s
    return np.stack([px, py], axis=1)


def _as_2d_points(points) -> np.ndarray:
    arr = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValidationError("plotting needs points shaped (n, 2)")
    if len(arr) == 0:
        raise ValidationError("refusing to plot an empty point set")
    return arr


def scatter_panel(points, canvas: Canvas, title: str = "",
                  color: str = SAMPLE_COLOR, reference=None) -> Panel:
    """Circles for samples, optional small squares for reference data."""
    elements = []
    if reference is not None:
        for x, y in _project(canvas, _as_2d_points(reference)):
            elements.append(
                f'<rect class="ref" x="{_fmt(x - 1.5)}" y="{_fmt(y - 1.5)}" '
                f'width="3.00" height="3.00" fill="{REFERENCE_COLOR}"/>'
            )
    for x, y in _project(canvas, _as_2d_points(points)):
        elements.append(
            f'<circle class="sample" cx="{_fmt(x)}" cy="{_fmt(y)}" '
            f'r="2.00" fill="{color}" fill-opacity="0.75"/>'
        )
    return Panel(title, elements)


def trajectory_panel(trajectories, canvas: Canvas, title: str = "") -> Panel:
    """Polylines colored by expert id (single color when ids are absent)."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ValidationError("refusing to plot an empty trajectory set")
    elements = []
    for traj in trajectories:
        states = np.asarray(traj.states, dtype=np.float64)
        if states.shape[1] != 2:
            raise ValidationError("trajectory plots need 2-D states")
        eid = traj.expert_id
        color = PALETTE[eid % len(PALETTE)] if eid is not None else SAMPLE_COLOR
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in _project(canvas, states))
        elements.append(
            f'<polyline class="traj" points="{pts}" fill="none" '
            f'stroke="{color}" stroke-width="1.20" stroke-opacity="0.65"/>'
        )
    return Panel(title, elements)


def render_figure(panels, canvas: Canvas = Canvas(), columns: int | None = None) -> str:
    """Compose panels into one SVG document laid out on a grid."""
    panels = list(panels)
    if not panels:
        raise ValidationError("figure needs at least one panel")
    cols = columns if columns is not None else len(panels)
    if cols < 1:
        raise ValidationError("columns must be positive")
    rows = (len(panels) + cols - 1) // cols
    cell = canvas.panel_size + 2 * canvas.margin
    width, height = cols * cell, rows * cell
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    for idx, panel in enumerate(panels):
        ox = (idx % cols) * cell + canvas.margin
        oy = (idx // cols) * cell + canvas.margin
        out.append(f'<g transform="translate({ox},{oy})">')
        out.append(
            f'<rect class="frame" x="0" y="0" width="{canvas.panel_size}" '
            f'height="{canvas.panel_size}" fill="none" stroke="#333333"/>'
        )
        if panel.title:
            out.append(
                f'<text x="{canvas.panel_size // 2}" y="-8" '
                f'text-anchor="middle" font-family="sans-serif" '
                f'font-size="13">{escape(panel.title)}</text>'
            )
        out.extend(panel.elements)
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def save_svg(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
