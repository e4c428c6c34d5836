"""Named-tensor checkpoint container.

Layout: 8-byte magic ``M2DCKPT1``, then a UTF-8 JSON header mapping each
tensor name to {shape, dtype, offset, nbytes} (offsets absolute from the
start of the file), then the little-endian raw payloads. Payloads default
to f32; f64 is accepted for test builds. A JSON sidecar (same stem,
``.json``) carries model configuration where a module needs one.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import M2dError

MAGIC = b"M2DCKPT1"

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], dtype: str = "<f4") -> None:
    """Write a named-tensor container atomically (temp file + rename)."""
    if dtype not in _DTYPES:
        raise M2dError(f"unsupported checkpoint dtype {dtype!r}")
    out_dtype = _DTYPES[dtype]
    payloads = {name: np.asarray(arr).astype(out_dtype, copy=False) for name, arr in tensors.items()}

    # Two passes: header size depends on offsets, offsets on header size.
    # Sizing the header with zeroed offsets first, then right-padding the
    # real header to that length keeps the layout stable.
    def build_header(offsets: dict[str, int]) -> bytes:
        entries = {
            name: {
                "shape": list(arr.shape),
                "dtype": dtype,
                "offset": offsets[name],
                "nbytes": arr.nbytes,
            }
            for name, arr in payloads.items()
        }
        return json.dumps(entries, sort_keys=True, separators=(",", ":")).encode("utf-8")

    names = sorted(payloads)
    probe = build_header({name: 0 for name in names})
    # Offsets are written with fixed 12-digit padding via int formatting in
    # JSON: ints render at natural width, so grow the probe by the widest
    # possible offset text and pad the final header with spaces.
    header_len = len(probe) + 12 * len(names)
    offsets = {}
    cursor = len(MAGIC) + header_len
    for name in names:
        offsets[name] = cursor
        cursor += payloads[name].nbytes
    header = build_header(offsets)
    header = header + b" " * (header_len - len(header))

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header)
        for name in names:
            fh.write(payloads[name].tobytes())
    os.replace(tmp, path)


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise M2dError(f"{path}: bad magic, not a checkpoint container")
    # latin-1 decoding is byte-transparent, so raw_decode finds the end of
    # the (pure-ASCII) JSON header without touching the binary payload.
    text = blob[len(MAGIC):].decode("latin-1")
    try:
        entries, _ = json.JSONDecoder().raw_decode(text)
    except json.JSONDecodeError as err:
        raise M2dError(f"{path}: unparseable checkpoint header: {err}") from err
    tensors = {}
    for name, meta in entries.items():
        dt = _DTYPES.get(meta["dtype"])
        if dt is None:
            raise M2dError(f"{path}: tensor {name!r} has unsupported dtype {meta['dtype']!r}")
        start, nbytes = meta["offset"], meta["nbytes"]
        arr = np.frombuffer(blob[start : start + nbytes], dtype=dt)
        tensors[name] = arr.reshape(meta["shape"]).copy()
    return tensors


def save_sidecar(path: str | Path, config: dict) -> Path:
    side = Path(path).with_suffix(".json")
    tmp = side.with_name(side.name + ".tmp")
    tmp.write_text(json.dumps(config, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, side)
    return side


def load_sidecar(path: str | Path) -> dict:
    side = Path(path).with_suffix(".json")
    return json.loads(side.read_text(encoding="utf-8"))
