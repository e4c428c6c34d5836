"""High-quality motion selection.

Two rules: the sequence must be strictly longer than 64 frames, and the
share of keypoints with confidence above 0.3 must exceed 70%. The share
is measured as the mean over frames of the per-frame high-confidence
fraction by default; a per-frame-minimum mode is selectable.
"""

from __future__ import annotations

from dataclasses import dataclass

from .motion import Corpus, MotionSequence


@dataclass(frozen=True)
class QualityPolicy:
    min_length_exclusive: int = 64
    conf_threshold: float = 0.3
    min_fraction: float = 0.7
    per_frame: bool = False  # True: every frame must clear min_fraction

    def __post_init__(self):
        if self.min_length_exclusive < 0:
            raise ValueError("min_length_exclusive must be >= 0")
        if not 0.0 <= self.conf_threshold <= 1.0:
            raise ValueError("conf_threshold must be in [0, 1]")
        if not 0.0 <= self.min_fraction <= 1.0:
            raise ValueError("min_fraction must be in [0, 1]")


@dataclass(frozen=True)
class QualityReport:
    accept: bool
    length: int
    high_conf_fraction: float  # mean-over-frames (or min-over-frames in per_frame mode)
    length_ok: bool
    confidence_ok: bool


def quality_filter(seq: MotionSequence, policy: QualityPolicy = QualityPolicy()) -> QualityReport:
    length_ok = seq.length > policy.min_length_exclusive
    per_frame_frac = (seq.frames[:, :, 2] > policy.conf_threshold).mean(axis=1)
    frac = float(per_frame_frac.min() if policy.per_frame else per_frame_frac.mean())
    confidence_ok = frac > policy.min_fraction
    return QualityReport(
        accept=length_ok and confidence_ok,
        length=seq.length,
        high_conf_fraction=frac,
        length_ok=length_ok,
        confidence_ok=confidence_ok,
    )


def filter_corpus(corpus: Corpus, policy: QualityPolicy = QualityPolicy()) -> tuple[Corpus, list[QualityReport]]:
    reports = [quality_filter(seq, policy) for seq, _ in corpus]
    kept = [entry for entry, rep in zip(corpus.entries, reports) if rep.accept]
    return Corpus(kept), reports
