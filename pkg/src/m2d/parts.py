"""Keypoint-to-part assignment for the 133-point COCO-WholeBody layout.

Index ranges follow the published ordering: body 0-16, feet 17-22,
face 23-90, hands 91-132 (left 91-111, right 112-132). Coarser groupings
(3 parts: feet merged into the body; 2 parts: additionally face merged
with hands) back the part-count ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_KEYPOINTS = 133

BODY, FOOT, FACE, HAND = "Body", "Foot", "Face", "Hand"

PART_RANGES: dict[str, tuple[int, int]] = {
    BODY: (0, 17),
    FOOT: (17, 23),
    FACE: (23, 91),
    HAND: (91, 133),
}

PART_ORDER = (BODY, FOOT, FACE, HAND)

LEFT_HAND_RANGE = (91, 112)
RIGHT_HAND_RANGE = (112, 133)

_GROUPINGS: dict[int, tuple[tuple[str, int, int], ...]] = {
    4: ((BODY, 0, 17), (FOOT, 17, 23), (FACE, 23, 91), (HAND, 91, 133)),
    3: (("BodyFoot", 0, 23), (FACE, 23, 91), (HAND, 91, 133)),
    2: (("BodyFoot", 0, 23), ("FaceHand", 23, 133)),
}


def keypoint_part(index: int) -> str:
    if not 0 <= index < N_KEYPOINTS:
        raise IndexError(f"keypoint index {index} out of range [0, {N_KEYPOINTS})")
    for part, (lo, hi) in PART_RANGES.items():
        if lo <= index < hi:
            return part
    raise AssertionError("unreachable: ranges cover [0, 133)")


@dataclass(frozen=True)
class PartTable:
    """Contiguous part ranges plus the additive attention mask.

    mask[i][j] == 0 iff keypoints i and j belong to the same part,
    otherwise -inf; symmetric and block-diagonal in the COCO ordering.
    """

    ranges: tuple[tuple[str, int, int], ...] = _GROUPINGS[4]

    def __post_init__(self):
        covered = 0
        for _, lo, hi in self.ranges:
            if lo != covered or hi <= lo:
                raise ValueError(f"part ranges must tile [0, {N_KEYPOINTS}) contiguously: {self.ranges}")
            covered = hi
        if covered != N_KEYPOINTS:
            raise ValueError(f"part ranges cover {covered} keypoints, need {N_KEYPOINTS}")
        part_of = np.empty(N_KEYPOINTS, dtype=object)
        for name, lo, hi in self.ranges:
            part_of[lo:hi] = name
        same = part_of[:, None] == part_of[None, :]
        object.__setattr__(self, "part_of", part_of)
        object.__setattr__(self, "mask", np.where(same, 0.0, -np.inf))

    @classmethod
    def with_n_parts(cls, n_parts: int) -> "PartTable":
        if n_parts not in _GROUPINGS:
            raise ValueError(f"n_parts must be one of {sorted(_GROUPINGS)}, got {n_parts}")
        return cls(_GROUPINGS[n_parts])

    @property
    def n_parts(self) -> int:
        return len(self.ranges)

    @property
    def counts(self) -> dict[str, int]:
        return {name: hi - lo for name, lo, hi in self.ranges}

    def part_of_index(self, index: int) -> str:
        if not 0 <= index < N_KEYPOINTS:
            raise IndexError(f"keypoint index {index} out of range [0, {N_KEYPOINTS})")
        return self.part_of[index]
