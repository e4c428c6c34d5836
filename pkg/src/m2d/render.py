"""SVG skeleton rendering.

One SVG per sampled frame plus an HTML index page. Keypoints draw as
circles and limb/face/hand connectivity as strokes, color-coded per part;
keypoints and edges that dip below the confidence threshold render dashed
and faded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

from .errors import M2dError
from .motion import MotionSequence
from .parts import keypoint_part

# COCO-WholeBody connectivity: body limbs, feet off the ankles, finger
# chains off each hand root. Face connectivity follows the usual
# 68-landmark polylines (jaw and nose open; brows open; eyes and lips
# closed loops), offset by the face block start at 23.
_BODY_EDGES = [
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12),
    (5, 6), (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
    (1, 3), (2, 4), (3, 5), (4, 6),
]
_FOOT_EDGES = [(15, 17), (15, 18), (15, 19), (16, 20), (16, 21), (16, 22)]


def _hand_edges(root: int) -> list[tuple[int, int]]:
    edges = []
    for finger in range(5):
        base = root + 1 + 4 * finger
        edges.append((root, base))
        edges.extend((base + j, base + j + 1) for j in range(3))
    return edges


def _chain(lo: int, hi: int, closed: bool = False) -> list[tuple[int, int]]:
    edges = [(i, i + 1) for i in range(lo, hi)]
    if closed:
        edges.append((hi, lo))
    return edges


def _face_edges() -> list[tuple[int, int]]:
    o = 23
    edges = []
    edges += _chain(o + 0, o + 16)            # jaw
    edges += _chain(o + 17, o + 21)           # right brow
    edges += _chain(o + 22, o + 26)           # left brow
    edges += _chain(o + 27, o + 30)           # nose bridge
    edges += _chain(o + 31, o + 35)           # nose base
    edges += _chain(o + 36, o + 41, True)     # right eye
    edges += _chain(o + 42, o + 47, True)     # left eye
    edges += _chain(o + 48, o + 59, True)     # outer lips
    edges += _chain(o + 60, o + 67, True)     # inner lips
    return edges


SKELETON_EDGES: tuple[tuple[int, int], ...] = tuple(
    _BODY_EDGES + _FOOT_EDGES + _face_edges() + _hand_edges(91) + _hand_edges(112)
)

DEFAULT_PART_COLORS = {
    "Body": "#2c7fb8",
    "Foot": "#e6842a",
    "Face": "#31a354",
    "Hand": "#d7301f",
}


@dataclass(frozen=True)
class SkeletonStyle:
    edges: tuple[tuple[int, int], ...] = SKELETON_EDGES
    part_colors: dict = field(default_factory=lambda: dict(DEFAULT_PART_COLORS))
    low_conf_threshold: float = 0.3
    low_conf_opacity: float = 0.35
    dash_pattern: str = "3,3"
    point_radius: float = 1.6
    stroke_width: float = 1.2

    def __post_init__(self):
        for a, b in self.edges:
            if not (0 <= a < 133 and 0 <= b < 133):
                raise M2dError(f"skeleton edge ({a}, {b}) out of keypoint range")

    def edge_color(self, a: int, b: int) -> str:
        # feet and hands attach to body joints; color by the distal end
        return self.part_colors[keypoint_part(max(a, b))]


def _frame_svg(frame, style: SkeletonStyle, viewbox: tuple[float, float, float, float],
               title: str) -> str:
    x0, y0, w, h = viewbox
    px_scale = max(w, h) / 240.0  # stroke sizes relative to the view extent
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{x0:.3f} {y0:.3f} {w:.3f} {h:.3f}" '
        f'width="480" height="480">',
        f"<title>{escape(title)}</title>",
        f'<rect x="{x0:.3f}" y="{y0:.3f}" width="{w:.3f}" height="{h:.3f}" fill="#ffffff"/>',
    ]
    thr = style.low_conf_threshold
    for a, b in style.edges:
        xa, ya, ca = frame[a]
        xb, yb, cb = frame[b]
        low = ca < thr or cb < thr
        attrs = (
            f'x1="{xa:.3f}" y1="{ya:.3f}" x2="{xb:.3f}" y2="{yb:.3f}" '
            f'stroke="{style.edge_color(a, b)}" stroke-width="{style.stroke_width * px_scale:.3f}"'
        )
        if low:
            attrs += f' stroke-dasharray="{style.dash_pattern}" opacity="{style.low_conf_opacity}"'
        parts.append(f"<line {attrs}/>")
    for idx in range(len(frame)):
        x, y, c = frame[idx]
        color = style.part_colors[keypoint_part(idx)]
        r = style.point_radius * px_scale
        if c < thr:
            parts.append(
                f'<circle cx="{x:.3f}" cy="{y:.3f}" r="{r:.3f}" fill="none" '
                f'stroke="{color}" stroke-dasharray="{style.dash_pattern}" '
                f'opacity="{style.low_conf_opacity}"/>'
            )
        else:
            parts.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="{r:.3f}" fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_sequence(seq: MotionSequence, style: SkeletonStyle = SkeletonStyle(),
                    stride: int = 1) -> tuple[list[str], str]:
    """Render every stride-th frame; returns (svg documents, index html)."""
    if stride < 1:
        raise M2dError(f"stride must be >= 1, got {stride}")
    frames = seq.frames
    xs, ys = frames[:, :, 0], frames[:, :, 1]
    margin = 0.05 * max(xs.max() - xs.min(), ys.max() - ys.min(), 1e-6)
    viewbox = (
        xs.min() - margin,
        ys.min() - margin,
        (xs.max() - xs.min()) + 2 * margin,
        (ys.max() - ys.min()) + 2 * margin,
    )
    indices = range(0, seq.length, stride)
    svgs = [
        _frame_svg(frames[i], style, viewbox, f"{seq.source_id or 'sequence'} frame {i}")
        for i in indices
    ]
    assert len(svgs) == math.ceil(seq.length / stride)
    items = "\n".join(
        f'<figure><img src="frame_{i:05d}.svg" width="320"/><figcaption>frame {i}</figcaption></figure>'
        for i in indices
    )
    index_html = (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"/>"
        f"<title>{escape(seq.source_id or 'sequence')}</title></head>\n"
        "<body style=\"display:flex;flex-wrap:wrap\">\n" + items + "\n</body></html>\n"
    )
    return svgs, index_html


def frame_filenames(seq_length: int, stride: int) -> list[str]:
    return [f"frame_{i:05d}.svg" for i in range(0, seq_length, stride)]
