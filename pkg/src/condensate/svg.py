"""Minimal write-only SVG overlays for spectra and verification output."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _path(points, stroke, width, dash=None):
    d = "M " + " L ".join(f"{z.real:.5f} {-z.imag:.5f}" for z in points)
    dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<path d="{d}" fill="none" stroke="{stroke}" '
            f'stroke-width="{width}"{dash_attr}/>')


def write_overlay(path, spectrum=None, anchors=None, candidate=None,
                  orthogonal=None, stagnation=None, title=""):
    """SVG with the spectrum (blue), candidate contour (orange), anchors
    (red dots), orthogonal trajectories (teal, dashed) and stagnation
    points (green crosses)."""
    pts = []
    for group in (spectrum, candidate):
        if group is not None:
            for a in group.arcs:
                pts.append(a.samples)
    if anchors is not None:
        pts.append(np.asarray(anchors.points))
    if orthogonal:
        pts.extend(np.asarray(o) for o in orthogonal)
    allz = np.concatenate(pts) if pts else np.array([0, 1j])
    x0, x1 = allz.real.min(), allz.real.max()
    y0, y1 = allz.imag.min(), allz.imag.max()
    pad = 0.15 * max(x1 - x0, y1 - y0, 1.0)
    x0, x1, y0, y1 = x0 - pad, x1 + pad, min(y0, 0) - pad, y1 + pad
    w = x1 - x0
    h = y1 - y0
    lw = 0.006 * max(w, h)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{x0:.4f} {-y1:.4f} '
        f'{w:.4f} {h:.4f}" width="640" height="{640 * h / w:.0f}">',
        f'<title>{title}</title>' if title else "",
        _path([complex(x0, 0), complex(x1, 0)], "#555555", lw),
    ]
    if orthogonal:
        for o in orthogonal:
            if len(o) > 1:
                parts.append(_path(o, "#2aa198", 0.7 * lw, dash=f"{3*lw} {3*lw}"))
    if candidate is not None:
        for a in candidate.arcs:
            parts.append(_path(a.samples, "#e87722", 1.2 * lw))
    if spectrum is not None:
        for a in spectrum.arcs:
            parts.append(_path(a.samples, "#1f5fc4", 1.5 * lw))
    if anchors is not None:
        for e in anchors.points:
            parts.append(f'<circle cx="{e.real:.5f}" cy="{-e.imag:.5f}" '
                         f'r="{2.2 * lw:.5f}" fill="#cc2222"/>')
    if stagnation:
        for z in stagnation:
            z = complex(z)
            s = 2.5 * lw
            parts.append(_path([z - s - 1j * s, z + s + 1j * s], "#1a8f3a", lw))
            parts.append(_path([z - s + 1j * s, z + s - 1j * s], "#1a8f3a", lw))
    parts.append("</svg>")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(p for p in parts if p) + "\n")
