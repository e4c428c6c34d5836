"""Corpus serialization: one JSON object per line.

Line schema, canonical key order:
{"id": str, "fps": number, "captions": [str, ...], "frames": [[[x, y, conf] x 133] x L]}

Floats are written with ``repr``-style shortest round-trip text, so
write(read(x)) is byte-stable after one canonical pass.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

from .errors import CorpusFormatError
from .motion import Corpus, MotionSequence
from .parts import N_KEYPOINTS


def read_corpus(stream) -> Corpus:
    """Parse JSONL from a binary/text stream, path, or bytes."""
    if isinstance(stream, (str, Path)):
        text = Path(stream).read_text(encoding="utf-8")
    elif isinstance(stream, bytes):
        text = stream.decode("utf-8")
    else:
        raw = stream.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw

    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as err:
            raise CorpusFormatError(f"line {lineno}: invalid JSON: {err.msg}") from err
        entries.append(_parse_entry(obj, lineno))
    return Corpus(entries)


def _parse_entry(obj, lineno: int) -> tuple[MotionSequence, list[str]]:
    if not isinstance(obj, dict):
        raise CorpusFormatError(f"line {lineno}: expected a JSON object")
    for key in ("id", "fps", "captions", "frames"):
        if key not in obj:
            raise CorpusFormatError(f"line {lineno}: missing key {key!r}")
    captions = obj["captions"]
    if not isinstance(captions, list) or not captions or any(
        not isinstance(c, str) or not c for c in captions
    ):
        raise CorpusFormatError(f"line {lineno}: captions must be a non-empty list of non-empty strings")
    frames = obj["frames"]
    if not isinstance(frames, list) or not frames:
        raise CorpusFormatError(f"line {lineno}: frames must be a non-empty list")
    for f_idx, frame in enumerate(frames):
        if not isinstance(frame, list) or len(frame) != N_KEYPOINTS:
            got = len(frame) if isinstance(frame, list) else type(frame).__name__
            raise CorpusFormatError(
                f"line {lineno}, frame {f_idx}: keypoints: expected {N_KEYPOINTS}, got {got}"
            )
        for k_idx, kp in enumerate(frame):
            if not isinstance(kp, list) or len(kp) != 3:
                raise CorpusFormatError(
                    f"line {lineno}, frame {f_idx}, keypoint {k_idx}: expected [x, y, conf]"
                )
            conf = kp[2]
            if not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
                raise CorpusFormatError(
                    f"line {lineno}, frame {f_idx}, keypoint {k_idx}: conf {conf!r} outside [0, 1]"
                )
    try:
        seq = MotionSequence(frames, fps=float(obj["fps"]), source_id=str(obj["id"]))
    except Exception as err:
        raise CorpusFormatError(f"line {lineno}: {err}") from err
    return seq, list(captions)


def _fmt(x: float) -> float | int:
    """Ints stay ints so canonical output is stable; floats keep repr text."""
    f = float(x)
    return int(f) if f.is_integer() and abs(f) < 2**53 else f


def write_corpus(corpus: Corpus, stream=None) -> bytes | None:
    """Serialize to canonical JSONL; returns bytes when no stream is given."""
    buf = io.StringIO()
    for seq, captions in corpus:
        obj = {
            "id": seq.source_id,
            "fps": _fmt(seq.fps),
            "captions": list(captions),
            "frames": [
                [[_fmt(v) for v in kp] for kp in frame] for frame in seq.frames.tolist()
            ],
        }
        buf.write(json.dumps(obj, separators=(",", ":"), ensure_ascii=False))
        buf.write("\n")
    data = buf.getvalue().encode("utf-8")
    if stream is None:
        return data
    if isinstance(stream, (str, Path)):
        Path(stream).write_bytes(data)
        return None
    stream.write(data)
    return None
