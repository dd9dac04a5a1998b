"""
``VPW1`` resampler checkpoints.

Layout: magic ``VPW1``, u32 little-endian length of a UTF-8 JSON header, the
header itself, then every tensor as float32 little-endian, row-major,
concatenated in header order. The header is ``{"config": {...}, "tensors":
[{"name", "shape", "offset", "nbytes"}, ...]}`` with offsets relative to the
start of the data section.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from gazeqa import CHECKPOINT_FORMAT
from gazeqa.errors import FileFormatError
from gazeqa.perceiver import ResamplerConfig, ResamplerWeights


MAGIC = CHECKPOINT_FORMAT.encode("ascii")
_LENGTH = struct.Struct("<I")
_F32_LE = np.dtype("<f4")


def checkpoint_to_bytes(weights: ResamplerWeights) -> bytes:
    index, chunks, offset = [], [], 0
    for name in weights.names():
        data = np.ascontiguousarray(weights[name], dtype=_F32_LE).tobytes()
        index.append({"name": name, "shape": list(weights[name].shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps(
        {"config": weights.config.to_json(), "tensors": index}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return MAGIC + _LENGTH.pack(len(header)) + header + b"".join(chunks)


def checkpoint_from_bytes(data: bytes) -> ResamplerWeights:
    prefix = len(MAGIC) + _LENGTH.size
    if len(data) < prefix or data[:len(MAGIC)] != MAGIC:
        raise FileFormatError(f"not a {CHECKPOINT_FORMAT} checkpoint (bad magic {data[:len(MAGIC)]!r})")
    (header_len,) = _LENGTH.unpack_from(data, len(MAGIC))
    try:
        header = json.loads(data[prefix:prefix + header_len].decode("utf-8"))
        config = ResamplerConfig.from_json(header["config"])
        index = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FileFormatError(f"corrupt {CHECKPOINT_FORMAT} header: {exc}") from exc

    body = data[prefix + header_len:]
    tensors = {}
    for entry in index:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(body):
            raise FileFormatError(f"tensor {entry['name']!r} runs past the end of the file")
        values = np.frombuffer(body, dtype=_F32_LE, count=nbytes // _F32_LE.itemsize, offset=start)
        tensors[entry["name"]] = values.reshape(entry["shape"]).astype(np.float64)
    return ResamplerWeights(config=config, tensors=tensors)


def save_checkpoint(path: str | Path, weights: ResamplerWeights):
    Path(path).write_bytes(checkpoint_to_bytes(weights))


def load_checkpoint(path: str | Path) -> ResamplerWeights:
    return checkpoint_from_bytes(Path(path).read_bytes())
