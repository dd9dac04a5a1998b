"""
On-disk formats: JSONL tracks, the ``VHM1`` binary heatmap and 8-bit PGM
export for inspection.

``VHM1`` layout: 4-byte magic, u32 little-endian height, u32 little-endian
width, then ``height*width`` float32 little-endian values in row-major order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from gazeqa import HEATMAP_FORMAT
from gazeqa.errors import FileFormatError
from gazeqa.gaze import Heatmap, PointTrack


VHM_MAGIC = HEATMAP_FORMAT.encode("ascii")
_VHM_HEADER = struct.Struct("<4sII")
_F32_LE = np.dtype("<f4")


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise FileFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc


def write_jsonl(path: str | Path, rows: Iterable[dict]):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def track_from_json(row: dict) -> PointTrack:
    try:
        return PointTrack.from_points(row["points"], source=row.get("source", "trace"))
    except KeyError as exc:
        raise FileFormatError(f"track is missing the {exc.args[0]!r} field") from exc


def read_tracks(path: str | Path) -> list[PointTrack]:
    return [track_from_json(row) for row in read_jsonl(path)]


def write_tracks(path: str | Path, tracks: Iterable[PointTrack]):
    write_jsonl(path, (t.to_json() for t in tracks))


def heatmap_to_bytes(heatmap: Heatmap) -> bytes:
    header = _VHM_HEADER.pack(VHM_MAGIC, heatmap.height, heatmap.width)
    return header + np.ascontiguousarray(heatmap.values, dtype=_F32_LE).tobytes()


def heatmap_from_bytes(data: bytes) -> Heatmap:
    if len(data) < _VHM_HEADER.size:
        raise FileFormatError(f"truncated {HEATMAP_FORMAT} header ({len(data)} bytes)")
    magic, height, width = _VHM_HEADER.unpack_from(data)
    if magic != VHM_MAGIC:
        raise FileFormatError(f"bad magic {magic!r}, expected {VHM_MAGIC!r}")
    expected = _VHM_HEADER.size + height * width * _F32_LE.itemsize
    if len(data) != expected:
        raise FileFormatError(
            f"{HEATMAP_FORMAT} payload for {height}×{width} should be {expected} bytes, got {len(data)}"
        )
    values = np.frombuffer(data, dtype=_F32_LE, offset=_VHM_HEADER.size).reshape(height, width)
    return Heatmap(values=values.astype(np.float64))


def save_heatmap(path: str | Path, heatmap: Heatmap):
    Path(path).write_bytes(heatmap_to_bytes(heatmap))


def load_heatmap(path: str | Path) -> Heatmap:
    return heatmap_from_bytes(Path(path).read_bytes())


def heatmap_to_pgm(heatmap: Heatmap) -> bytes:
    """Binary P5 greymap, brightest pixel at 255."""
    peak = heatmap.values.max()
    scaled = heatmap.values / peak * 255.0 if peak > 0 else np.zeros_like(heatmap.values)
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    return f"P5\n{heatmap.width} {heatmap.height}\n255\n".encode("ascii") + pixels.tobytes()


def save_pgm(path: str | Path, heatmap: Heatmap):
    Path(path).write_bytes(heatmap_to_pgm(heatmap))
