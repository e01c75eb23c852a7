"""SVG stick-figure rendering: front and side orthographic views side by
side, one figure per sampled frame with opacity fading toward later frames,
plus the root-joint trajectory as a polyline."""

from __future__ import annotations

import numpy as np

from .motion import MotionSequence
from .skeleton import NUM_JOINTS, PARENTS

_MARGIN = 0.25
_VIEW_W = 420.0
_VIEW_H = 420.0
_GAP = 40.0
ROOT = 0

# (label, horizontal world axis): vertical is always world y (up).
_VIEWS = [("front", 0), ("side", 2)]


def _project(data: np.ndarray, axis: int) -> np.ndarray:
    """World [F, J, 3] -> plot coords [F, J, 2] with y flipped for SVG."""
    pts = np.stack([data[..., axis], -data[..., 1]], axis=-1)
    return pts


def render_svg(motion: MotionSequence, stride: int = 28) -> str:
    """One stick figure per sampled frame; later frames are more transparent."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    data = np.asarray(motion.data, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("cannot render an empty motion")
    frames = list(range(0, len(data), stride))

    panels = []
    x_off = 0.0
    for label, axis in _VIEWS:
        pts = _project(data, axis)
        lo = pts.reshape(-1, 2).min(axis=0) - _MARGIN
        hi = pts.reshape(-1, 2).max(axis=0) + _MARGIN
        span = np.maximum(hi - lo, 1e-6)
        scale = min(_VIEW_W / span[0], (_VIEW_H - 24) / span[1])

        def to_px(p, x_off=x_off, lo=lo, scale=scale):
            return (
                x_off + (p[0] - lo[0]) * scale,
                24 + (p[1] - lo[1]) * scale,
            )

        parts = [
            f'<text x="{x_off + 8:.1f}" y="16" font-family="monospace" font-size="14">{label}</text>'
        ]
        root_path = " ".join(
            "{:.1f},{:.1f}".format(*to_px(pts[f, ROOT])) for f in range(len(data))
        )
        parts.append(
            f'<polyline points="{root_path}" fill="none" stroke="#c04040" '
            'stroke-width="1.2" stroke-dasharray="4 3" opacity="0.8"/>'
        )
        for rank, f in enumerate(frames):
            opacity = 1.0 - 0.85 * (rank / max(len(frames) - 1, 1))
            segs = []
            for j in range(NUM_JOINTS):
                parent = PARENTS[j]
                if parent < 0:
                    continue
                x1, y1 = to_px(pts[f, parent])
                x2, y2 = to_px(pts[f, j])
                segs.append(
                    f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}"/>'
                )
            parts.append(
                f'<g stroke="#202a40" stroke-width="2" stroke-linecap="round" '
                f'opacity="{opacity:.3f}">' + "".join(segs) + "</g>"
            )
        panels.append("".join(parts))
        x_off += _VIEW_W + _GAP

    width = 2 * _VIEW_W + _GAP
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{_VIEW_H:.0f}" viewBox="0 0 {width:.0f} {_VIEW_H:.0f}">'
        '<rect width="100%" height="100%" fill="white"/>'
        + "".join(panels)
        + "</svg>"
    )
