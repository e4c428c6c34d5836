"""Procedural synthetic motion corpus.

A fixed template family (wave left/right hand, raise both arms, walk in
place, jump, nod head, crouch, kick, clap) animates a canonical 133-point
skeleton on a 512x512 canvas. Hands ride their wrists, feet their ankles,
and the face its nose, so each template only scripts the 23 body/foot
joints. Per-sequence amplitude/frequency/phase jitter, small coordinate
noise, near-1.0 confidences with occasional dips, and templated captions
make the output a usable stand-in for real pose-tracked data. Everything
is deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import M2dError
from .motion import Corpus, MotionSequence

CANVAS = 512.0

# Canonical joint positions (x right, y down), person centered, left side
# of the body at smaller x.
_BASE_BODY = np.array(
    [
        (256, 130),  # 0 nose
        (250, 124),  # 1 left eye
        (262, 124),  # 2 right eye
        (242, 128),  # 3 left ear
        (270, 128),  # 4 right ear
        (216, 180),  # 5 left shoulder
        (296, 180),  # 6 right shoulder
        (196, 235),  # 7 left elbow
        (316, 235),  # 8 right elbow
        (186, 285),  # 9 left wrist
        (326, 285),  # 10 right wrist
        (230, 290),  # 11 left hip
        (282, 290),  # 12 right hip
        (226, 355),  # 13 left knee
        (286, 355),  # 14 right knee
        (224, 415),  # 15 left ankle
        (288, 415),  # 16 right ankle
        (218, 430),  # 17 left big toe
        (210, 428),  # 18 left small toe
        (228, 422),  # 19 left heel
        (294, 430),  # 20 right big toe
        (302, 428),  # 21 right small toe
        (284, 422),  # 22 right heel
    ],
    dtype=np.float64,
)

HEAD_JOINTS = [0, 1, 2, 3, 4]
LEFT_FOOT = [17, 18, 19]
RIGHT_FOOT = [20, 21, 22]


def _face_offsets() -> np.ndarray:
    """68 landmark offsets from the nose: jaw arc, brows, nose, eyes, lips."""
    pts = []
    for i in range(17):  # jaw, ear to ear through the chin
        a = np.pi * (0.15 + 0.7 * i / 16)
        pts.append((-22 * np.cos(a), 8 + 20 * np.sin(a)))
    for i in range(5):  # left brow
        pts.append((-14 + 5 * i / 2, -10 - 2 * np.sin(np.pi * i / 4)))
    for i in range(5):  # right brow
        pts.append((4 + 5 * i / 2, -10 - 2 * np.sin(np.pi * i / 4)))
    for i in range(4):  # nose bridge
        pts.append((0, -6 + 3.5 * i))
    for i in range(5):  # nose base
        pts.append((-4 + 2 * i, 8))
    for i in range(6):  # left eye
        a = 2 * np.pi * i / 6
        pts.append((-8 + 3 * np.cos(a), -4 + 1.5 * np.sin(a)))
    for i in range(6):  # right eye
        a = 2 * np.pi * i / 6
        pts.append((8 + 3 * np.cos(a), -4 + 1.5 * np.sin(a)))
    for i in range(12):  # outer lips
        a = 2 * np.pi * i / 12
        pts.append((6 * np.cos(a), 14 + 3 * np.sin(a)))
    for i in range(8):  # inner lips
        a = 2 * np.pi * i / 8
        pts.append((4 * np.cos(a), 14 + 1.8 * np.sin(a)))
    return np.array(pts, dtype=np.float64)


def _hand_offsets(side: int) -> np.ndarray:
    """21 points: root at the wrist plus 5 fingers of 4 joints fanning out."""
    pts = [(0.0, 0.0)]
    for finger in range(5):
        ang = np.pi / 2 + side * (0.5 - 0.25 * finger)
        for joint in range(1, 5):
            r = 4.5 * joint
            pts.append((side * r * np.cos(ang) * 0.6, r * np.sin(ang) * 0.55 + 2))
    return np.array(pts, dtype=np.float64)


def base_pose() -> np.ndarray:
    """The canonical 133x2 rest pose in pixel coordinates."""
    pose = np.zeros((133, 2), dtype=np.float64)
    pose[:23] = _BASE_BODY
    pose[23:91] = _BASE_BODY[0] + _face_offsets()
    pose[91:112] = _BASE_BODY[9] + _hand_offsets(side=-1)
    pose[112:133] = _BASE_BODY[10] + _hand_offsets(side=+1)
    return pose


# Each mover fills per-frame deltas for joints 0..22 given jittered params.
Mover = Callable[[np.ndarray, dict], None]  # (delta (L,23,2), params) -> None


def _phase(L: int, p: dict) -> np.ndarray:
    t = np.arange(L)
    return 2 * np.pi * p["freq"] * t + p["phase"]


def _wave(delta, p, wrist, elbow):
    w = _phase(delta.shape[0], p)
    amp = p["amp"]
    delta[:, wrist, 0] = 30 * amp * np.sin(w)
    delta[:, wrist, 1] = -60 * amp + 6 * amp * np.cos(2 * w)
    delta[:, elbow, 0] = 10 * amp * np.sin(w)
    delta[:, elbow, 1] = -18 * amp


def _mover_wave_right(delta, p):
    _wave(delta, p, wrist=10, elbow=8)


def _mover_wave_left(delta, p):
    _wave(delta, p, wrist=9, elbow=7)


def _mover_raise_both(delta, p):
    L = delta.shape[0]
    rise = np.clip(np.arange(L) / max(1, L // 2), 0, 1)
    rise = rise * rise * (3 - 2 * rise)  # smoothstep
    lift = 130 * p["amp"] * rise
    wobble = 4 * np.sin(_phase(L, p))
    for wrist, elbow, sgn in ((9, 7, -1), (10, 8, 1)):
        delta[:, wrist, 1] = -lift + wobble
        delta[:, wrist, 0] = -sgn * 0.25 * lift
        delta[:, elbow, 1] = -0.55 * lift
        delta[:, elbow, 0] = -sgn * 0.1 * lift


def _mover_walk(delta, p):
    L = delta.shape[0]
    w = _phase(L, p)
    amp = 22 * p["amp"]
    left = amp * np.maximum(0, np.sin(w))
    right = amp * np.maximum(0, -np.sin(w))
    delta[:, 15, 1] = -left
    delta[:, 13, 1] = -0.6 * left
    delta[:, 16, 1] = -right
    delta[:, 14, 1] = -0.6 * right
    # counter-swinging arms and a slight torso bob
    delta[:, 9, 0] = 8 * p["amp"] * np.sin(w)
    delta[:, 10, 0] = -8 * p["amp"] * np.sin(w)
    delta[:, :13, 1] += 2.5 * np.abs(np.sin(w))[:, None]


def _mover_jump(delta, p):
    L = delta.shape[0]
    hop = 34 * p["amp"] * np.abs(np.sin(_phase(L, p)))
    delta[:, :, 1] -= hop[:, None]
    delta[:, 9, 1] += 0.25 * hop
    delta[:, 10, 1] += 0.25 * hop


def _mover_nod(delta, p):
    L = delta.shape[0]
    bob = 9 * p["amp"] * np.sin(_phase(L, p))
    for j in HEAD_JOINTS:
        delta[:, j, 1] = bob


def _mover_crouch(delta, p):
    L = delta.shape[0]
    sink = 45 * p["amp"] * (1 - np.cos(_phase(L, p))) / 2
    for j in list(range(0, 13)):  # head, arms, torso sink; legs fold
        delta[:, j, 1] += sink
    delta[:, 13, 0] -= 0.25 * sink
    delta[:, 14, 0] += 0.25 * sink


def _mover_kick(delta, p):
    L = delta.shape[0]
    swing = np.maximum(0, np.sin(_phase(L, p)))
    delta[:, 16, 0] = 40 * p["amp"] * swing
    delta[:, 16, 1] = -30 * p["amp"] * swing
    delta[:, 14, 0] = 18 * p["amp"] * swing
    delta[:, 14, 1] = -10 * p["amp"] * swing


def _mover_clap(delta, p):
    L = delta.shape[0]
    meet = (1 + np.sin(_phase(L, p))) / 2
    reach = 52 * p["amp"] * meet
    delta[:, 9, 0] = reach
    delta[:, 10, 0] = -reach
    delta[:, 9, 1] = -25 * p["amp"]
    delta[:, 10, 1] = -25 * p["amp"]
    delta[:, 7, 0] = 0.4 * reach
    delta[:, 8, 0] = -0.4 * reach


@dataclass(frozen=True)
class Template:
    name: str
    action_word: str
    captions: tuple[str, ...]
    mover: Mover


TEMPLATES: dict[str, Template] = {
    t.name: t
    for t in [
        Template(
            "wave_right_hand",
            "wave",
            (
                "a person waves the right hand",
                "the right hand waves in the air",
                "someone waves with the right hand",
            ),
            _mover_wave_right,
        ),
        Template(
            "wave_left_hand",
            "wave",
            (
                "a person waves the left hand",
                "the left hand waves in the air",
                "someone waves with the left hand",
            ),
            _mover_wave_left,
        ),
        Template(
            "raise_both_arms",
            "raise",
            (
                "a person raises both arms",
                "both arms raise above the head",
                "someone raises both arms up high",
            ),
            _mover_raise_both,
        ),
        Template(
            "walk_in_place",
            "walk",
            (
                "a person walks in place",
                "someone walks in place steadily",
                "walking in place without moving forward",
            ),
            _mover_walk,
        ),
        Template(
            "jump",
            "jump",
            (
                "a person jumps up and down",
                "someone jumps repeatedly on the spot",
                "jumping up and down",
            ),
            _mover_jump,
        ),
        Template(
            "nod_head",
            "nod",
            (
                "a person nods the head",
                "someone nods their head",
                "the head nods up and down",
            ),
            _mover_nod,
        ),
        Template(
            "crouch",
            "crouch",
            (
                "a person crouches down",
                "someone crouches down low",
                "crouching down and standing back up",
            ),
            _mover_crouch,
        ),
        Template(
            "kick",
            "kick",
            (
                "a person kicks with the right leg",
                "someone kicks forward with one leg",
                "a forward kick with the leg",
            ),
            _mover_kick,
        ),
        Template(
            "clap",
            "clap",
            (
                "a person claps the hands",
                "someone claps both hands together",
                "clapping hands together",
            ),
            _mover_clap,
        ),
    ]
}

DEFAULT_TEMPLATE_SET = tuple(TEMPLATES)


@dataclass(frozen=True)
class SynthSpec:
    n_sequences: int
    min_length: int = 65
    max_length: int = 76
    seed: int = 0
    templates: tuple[str, ...] = DEFAULT_TEMPLATE_SET
    fps: float = 30.0
    noise_sigma: float = 0.25
    conf_dip_prob: float = 0.02

    def __post_init__(self):
        if self.n_sequences < 1:
            raise M2dError("n_sequences must be >= 1")
        if not self.templates:
            raise M2dError("template set must not be empty")
        unknown = [t for t in self.templates if t not in TEMPLATES]
        if unknown:
            raise M2dError(f"unknown templates: {unknown} (known: {sorted(TEMPLATES)})")
        if not 2 <= self.min_length <= self.max_length:
            raise M2dError("need 2 <= min_length <= max_length")


def _synth_sequence(template: Template, L: int, rng: np.random.Generator, spec: SynthSpec, idx: int) -> MotionSequence:
    params = {
        "amp": rng.uniform(0.8, 1.25),
        "freq": rng.uniform(0.06, 0.11),
        "phase": rng.uniform(0, 2 * np.pi),
    }
    delta = np.zeros((L, 23, 2), dtype=np.float64)
    template.mover(delta, params)
    # feet ride their ankles on top of any template-specific foot motion
    delta[:, LEFT_FOOT, :] += delta[:, [15], :]
    delta[:, RIGHT_FOOT, :] += delta[:, [16], :]

    base = base_pose()
    frames = np.zeros((L, 133, 2), dtype=np.float64)
    frames[:, :23] = base[:23] + delta
    frames[:, 23:91] = base[23:91] + delta[:, [0], :]  # face rides the nose
    frames[:, 91:112] = base[91:112] + delta[:, [9], :]  # left hand rides its wrist
    frames[:, 112:133] = base[112:133] + delta[:, [10], :]

    # whole-sequence placement jitter, then per-keypoint noise
    scale = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-30, 30, size=2)
    frames = (frames - CANVAS / 2) * scale + CANVAS / 2 + shift
    frames += rng.normal(0, spec.noise_sigma, size=frames.shape)

    conf = np.clip(1.0 - np.abs(rng.normal(0, 0.03, size=(L, 133))), 0.0, 1.0)
    dips = rng.random((L, 133)) < spec.conf_dip_prob
    conf[dips] = rng.uniform(0.05, 0.29, size=int(dips.sum()))

    # millipixel/1e-4 rounding: far below the noise floor, 3x smaller JSONL
    full = np.concatenate([np.round(frames, 3), np.round(conf[:, :, None], 4)], axis=2)
    return MotionSequence(full, fps=spec.fps, source_id=f"synth-{template.name}-{idx:04d}")


def generate_synthetic_corpus(spec: SynthSpec) -> Corpus:
    """Build n procedural sequences cycling through the template set."""
    rng = np.random.default_rng(spec.seed)
    entries = []
    for i in range(spec.n_sequences):
        template = TEMPLATES[spec.templates[i % len(spec.templates)]]
        L = int(rng.integers(spec.min_length, spec.max_length + 1))
        seq = _synth_sequence(template, L, rng, spec, i)
        n_caps = 1 + int(rng.integers(0, 2))
        order = rng.permutation(len(template.captions))[:n_caps]
        captions = [template.captions[j] for j in order]
        entries.append((seq, captions))
    return Corpus(entries)


def mean_block_speed(seq: MotionSequence, indices) -> float:
    """Mean per-frame displacement magnitude over a keypoint block."""
    coords = seq.frames[:, indices, :2]
    steps = np.linalg.norm(np.diff(coords, axis=0), axis=-1)
    return float(steps.mean())
