"""Hand-rolled SVG figures: byte-deterministic, no external renderer.

Coordinates are laid out with equal aspect and a flipped y axis so that
figures read like maps.  All numbers are written with fixed formatting,
which makes repeated renders of the same data byte-identical.
"""

from __future__ import annotations

import numpy as np

# one color per location section
SECTION_COLORS = (
    "#1f77b4",
    "#ff7f0e",
    "#2ca02c",
    "#d62728",
    "#9467bd",
    "#8c564b",
    "#e377c2",
    "#17becf",
)


def _fmt(x: float) -> str:
    return f"{x:.2f}"


class SvgCanvas:
    """Collects geometry in data coordinates; projects at render time."""

    def __init__(self, width: int = 720, height: int = 720, margin: float = 40.0):
        self.width = width
        self.height = height
        self.margin = margin
        self._shapes: list[tuple] = []
        self._xs: list[np.ndarray] = []
        self._ys: list[np.ndarray] = []

    def _track(self, pts: np.ndarray):
        self._xs.append(pts[:, 0])
        self._ys.append(pts[:, 1])

    def add_polyline(self, points, color: str = "#000000", width: float = 1.5,
                     opacity: float = 1.0, dashed: bool = False):
        pts = np.asarray(points, dtype=np.float64)[:, :2]
        if len(pts) < 2:
            raise ValueError("polyline needs at least two points")
        self._track(pts)
        self._shapes.append(("polyline", pts, color, width, opacity, dashed))

    def add_polygon(self, points, fill: str = "#cccccc", opacity: float = 0.35):
        pts = np.asarray(points, dtype=np.float64)[:, :2]
        if len(pts) < 3:
            raise ValueError("polygon needs at least three points")
        self._track(pts)
        self._shapes.append(("polygon", pts, fill, opacity))

    def add_marker(self, xy, radius: float = 3.5, color: str = "#000000"):
        pt = np.asarray(xy, dtype=np.float64)[:2].reshape(1, 2)
        self._track(pt)
        self._shapes.append(("marker", pt, radius, color))

    def add_label(self, xy, text: str, color: str = "#333333", size: int = 12):
        pt = np.asarray(xy, dtype=np.float64)[:2].reshape(1, 2)
        self._track(pt)
        self._shapes.append(("label", pt, str(text), color, size))

    def _projection(self):
        if self._xs:
            xs = np.concatenate(self._xs)
            ys = np.concatenate(self._ys)
            x0, x1 = float(xs.min()), float(xs.max())
            y0, y1 = float(ys.min()), float(ys.max())
        else:
            x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
        span_x = max(x1 - x0, 1e-9)
        span_y = max(y1 - y0, 1e-9)
        inner_w = self.width - 2 * self.margin
        inner_h = self.height - 2 * self.margin
        scale = min(inner_w / span_x, inner_h / span_y)
        off_x = self.margin + (inner_w - scale * span_x) / 2.0
        off_y = self.margin + (inner_h - scale * span_y) / 2.0

        def proj(pts: np.ndarray) -> np.ndarray:
            out = np.empty_like(pts)
            out[:, 0] = off_x + (pts[:, 0] - x0) * scale
            out[:, 1] = self.height - (off_y + (pts[:, 1] - y0) * scale)
            return out

        return proj

    def render(self) -> str:
        proj = self._projection()
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" '
            f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">',
            f'<rect width="{self.width}" height="{self.height}" fill="#ffffff"/>',
        ]
        for shape in self._shapes:
            kind = shape[0]
            if kind == "polyline":
                _, pts, color, width, opacity, dashed = shape
                coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in proj(pts))
                dash = ' stroke-dasharray="6 4"' if dashed else ""
                parts.append(
                    f'<polyline points="{coords}" fill="none" stroke="{color}" '
                    f'stroke-width="{_fmt(width)}" stroke-opacity="{_fmt(opacity)}"{dash}/>'
                )
            elif kind == "polygon":
                _, pts, fill, opacity = shape
                coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in proj(pts))
                parts.append(f'<polygon points="{coords}" fill="{fill}" fill-opacity="{_fmt(opacity)}" stroke="none"/>')
            elif kind == "marker":
                _, pt, radius, color = shape
                x, y = proj(pt)[0]
                parts.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(radius)}" fill="{color}"/>')
            else:
                _, pt, text, color, size = shape
                x, y = proj(pt)[0]
                parts.append(f'<text x="{_fmt(x)}" y="{_fmt(y)}" fill="{color}" font-size="{size}">{text}</text>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.render())


def plot_anchors(anchors, path, width: int = 720, height: int = 720):
    """All anchor curves, one color per location section, thicker = faster class."""
    canvas = SvgCanvas(width, height)
    canvas.add_marker((0.0, 0.0), radius=4.0, color="#000000")
    n_acc = anchors.n_acc
    for k in range(anchors.n_classes):
        section = k // n_acc
        accel = k % n_acc
        canvas.add_polyline(
            anchors.anchors[k, :, :2],
            color=SECTION_COLORS[section % len(SECTION_COLORS)],
            width=1.0 + 0.8 * accel,
            opacity=0.9,
        )
    canvas.save(path)
    return canvas


def plot_scene(path, history, future, means, probs=None, neighbors=(), width: int = 720, height: int = 720):
    """One sample: history, ground truth, and predicted mean(s).

    `means` is either a single (F, 2+) trajectory or a stack (K, F, 2+); with
    a stack, per-component opacity scales with its probability so likely
    modes dominate the figure.
    """
    canvas = SvgCanvas(width, height)
    for block in neighbors:
        canvas.add_polyline(np.asarray(block)[:, :2], color="#9a9a9a", width=1.0, opacity=0.7)
    canvas.add_polyline(np.asarray(history)[:, :2], color="#000000", width=2.2)
    canvas.add_marker(np.asarray(history)[-1, :2], radius=4.0, color="#000000")
    canvas.add_polyline(np.asarray(future)[:, :2], color="#2a9d3a", width=2.2)
    means = np.asarray(means, dtype=np.float64)
    if means.ndim == 2:
        canvas.add_polyline(means[:, :2], color="#d62728", width=2.0, dashed=True)
    else:
        if probs is None:
            probs = np.full(len(means), 1.0 / max(len(means), 1))
        top = float(np.max(probs)) if len(probs) else 1.0
        for k in range(len(means)):
            rel = float(probs[k]) / top if top > 0 else 0.0
            canvas.add_polyline(
                means[k, :, :2], color="#d62728", width=1.2, opacity=0.10 + 0.85 * rel, dashed=True
            )
    canvas.save(path)
    return canvas
