"""Writers for the engine's on-disk formats.

Implemented against the published byte layout, not against the engine's
code: bank files are magic ``KEDB``, u32 LE version (=1), u32 LE dim,
u64 LE count, u8 normalized flag, 7 pad bytes, then count x dim f32 LE
row-major. All writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<4sIIQB7x")


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def write_bank(values: np.ndarray, path: str | Path, normalized: bool = True) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError(f"bank must be 2-d, got shape {values.shape}")
    header = _HEADER.pack(b"KEDB", 1, values.shape[1], values.shape[0], 1 if normalized else 0)
    _atomic_write(Path(path), header + values.tobytes())


def write_records(records: list[dict], path: str | Path) -> None:
    lines = []
    for rec in records:
        lines.append(json.dumps({
            "id": rec["id"],
            "caption_tokens": rec["caption_tokens"],
            "subject_span": rec["subject_span"],
            "text": rec.get("text"),
        }))
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode() if lines else b"")


def write_vocab(mapping: dict[str, int], path: str | Path) -> None:
    payload = json.dumps(dict(sorted(mapping.items())), indent=2) + "\n"
    _atomic_write(Path(path), payload.encode())
