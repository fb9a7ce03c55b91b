"""Minimal SVG rendering of a TSP tour or CVRP solution."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .routing import TspInstance, flags_to_routes

SIZE = 600
PAD = 20
COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
          "#bcbd22", "#17becf")


def _project(coords: np.ndarray) -> np.ndarray:
    lo = coords.min(axis=0)
    span = float((coords.max(axis=0) - lo).max()) or 1.0
    xy = (coords - lo) / span * (SIZE - 2 * PAD) + PAD
    xy[:, 1] = SIZE - xy[:, 1]  # y grows upward in the plot
    return xy


def _polyline(points, color, closed=False):
    tag = "polygon" if closed else "polyline"
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return f'<{tag} points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'


def solution_svg(instance, solution, title: str = "") -> str:
    xy = _project(np.asarray(instance.coords, dtype=np.float64))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" '
             f'viewBox="0 0 {SIZE} {SIZE}">', f'<rect width="{SIZE}" height="{SIZE}" fill="white"/>']
    if title:
        parts.append(f'<text x="{PAD}" y="{PAD - 5}" font-size="12" font-family="sans-serif">{title}</text>')
    if isinstance(instance, TspInstance):
        if solution is not None:
            parts.append(_polyline(xy[list(solution.order)], COLORS[0], closed=True))
        nodes = range(instance.n)
    else:
        if solution is not None:
            for k, r in enumerate(flags_to_routes(solution)):
                parts.append(_polyline(xy[[0, *r, 0]], COLORS[k % len(COLORS)]))
        nodes = range(1, instance.n + 1)
    for i in nodes:
        parts.append(f'<circle cx="{xy[i, 0]:.2f}" cy="{xy[i, 1]:.2f}" r="3" fill="black"/>')
    if not isinstance(instance, TspInstance):
        x, y = xy[0]
        parts.append(f'<rect x="{x - 6:.2f}" y="{y - 6:.2f}" width="12" height="12" fill="red"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_svg(path, instance, solution, title: str = "") -> Path:
    path = Path(path)
    path.write_text(solution_svg(instance, solution, title))
    return path
