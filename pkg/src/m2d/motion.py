"""Motion sequences, normalization, and velocity.

A motion is L frames x 133 keypoints x (x, y, conf): coordinates in
pixels, confidence in [0, 1]. All model code consumes sequences after
``normalize_sequence`` has mapped the confidence-weighted bounding square
of the whole sequence onto [-1, 1]^2 (sequence-global, so velocities stay
meaningful).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import M2dError, ShapeError
from .parts import N_KEYPOINTS


@dataclass
class MotionSequence:
    frames: np.ndarray  # (L, 133, 3) float
    fps: float = 30.0
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (N_KEYPOINTS, 3):
            raise ShapeError(
                f"frames must be (L, {N_KEYPOINTS}, 3), got {self.frames.shape}"
            )
        if self.frames.shape[0] < 1:
            raise M2dError("motion sequence needs at least one frame")
        if not np.all(np.isfinite(self.frames)):
            raise M2dError(f"{self.source_id or 'sequence'}: non-finite coordinates")
        conf = self.frames[:, :, 2]
        if conf.min() < 0.0 or conf.max() > 1.0:
            raise M2dError(
                f"{self.source_id or 'sequence'}: confidence outside [0, 1] "
                f"(range {conf.min():.4g}..{conf.max():.4g})"
            )

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class Corpus:
    entries: list[tuple[MotionSequence, list[str]]] = field(default_factory=list)

    def __post_init__(self):
        for i, (_, captions) in enumerate(self.entries):
            if not captions or any(not c for c in captions):
                raise M2dError(f"corpus entry {i} needs at least one non-empty caption")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def sequences(self) -> list[MotionSequence]:
        return [seq for seq, _ in self.entries]


@dataclass(frozen=True)
class NormTransform:
    """Affine map p -> (p - center) / scale applied to x and y."""

    center: tuple[float, float]
    scale: float

    def __post_init__(self):
        if self.scale <= 0:
            raise M2dError(f"normalization scale must be positive, got {self.scale}")

    def apply(self, frames: np.ndarray) -> np.ndarray:
        out = frames.copy()
        out[..., 0] = (frames[..., 0] - self.center[0]) / self.scale
        out[..., 1] = (frames[..., 1] - self.center[1]) / self.scale
        return out

    def invert(self, frames: np.ndarray) -> np.ndarray:
        out = frames.copy()
        out[..., 0] = frames[..., 0] * self.scale + self.center[0]
        out[..., 1] = frames[..., 1] * self.scale + self.center[1]
        return out


def normalize_sequence(seq: MotionSequence) -> tuple[MotionSequence, NormTransform]:
    """Map the confidence-weighted bounding square of the sequence to [-1, 1]^2.

    The bounding box is taken over keypoints with conf > 0, its longer side
    becomes the scale (square aspect preserved), and confidences pass
    through unchanged.
    """
    conf = seq.frames[:, :, 2]
    visible = conf > 0
    if not visible.any():
        raise M2dError("normalize_sequence: all-zero confidence, no spatial anchor")
    xs = seq.frames[:, :, 0][visible]
    ys = seq.frames[:, :, 1][visible]
    cx = (xs.min() + xs.max()) / 2.0
    cy = (ys.min() + ys.max()) / 2.0
    half = max(xs.max() - xs.min(), ys.max() - ys.min()) / 2.0
    if half == 0.0:
        half = 1.0  # single visible point: identity-scale, centered
    transform = NormTransform(center=(cx, cy), scale=half)
    return (
        MotionSequence(transform.apply(seq.frames), fps=seq.fps, source_id=seq.source_id),
        transform,
    )


def frame_velocity(seq: MotionSequence | np.ndarray) -> np.ndarray:
    """First differences of the (x, y) coordinates: (L-1, 133, 2)."""
    frames = seq.frames if isinstance(seq, MotionSequence) else np.asarray(seq)
    if frames.shape[0] < 2:
        raise M2dError(f"frame_velocity needs L >= 2, got L={frames.shape[0]}")
    return np.diff(frames[:, :, :2], axis=0)
