"""Binary weight archive.

Layout: b"PCRD", one format-version byte, then records until EOF::

    u32 name_length, name (utf-8), u32 rank, rank x u32 dims, float32 data (row-major)

All integers and floats are little-endian.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .networks import NetworkWeights

MAGIC = b"PCRD"
VERSION = 1


class ArchiveError(ValueError):
    pass


def dumps(weights: NetworkWeights) -> bytes:
    chunks = [MAGIC, bytes([VERSION])]
    for name, tensor in weights.tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def loads(data: bytes) -> NetworkWeights:
    if data[:4] != MAGIC:
        raise ArchiveError("not a PCRD weight archive")
    if len(data) < 5 or data[4] != VERSION:
        raise ArchiveError(f"unsupported archive version {data[4] if len(data) > 4 else None}")
    pos = 5
    tensors = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(data):
                raise ArchiveError(f"truncated tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except struct.error as exc:
        raise ArchiveError(f"truncated archive at byte {pos}") from exc
    kind = "box" if "tnet.w1" in tensors else "classifier"
    return NetworkWeights(kind, tensors)


def save_weights(path, weights: NetworkWeights) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(weights))


def load_weights(path, check: bool = True) -> NetworkWeights:
    with open(path, "rb") as fh:
        w = loads(fh.read())
    if check:
        w.check()
    return w


def meta_path(path) -> str:
    return str(path) + ".meta"


def save_checkpoint(path, weights: NetworkWeights, meta: dict) -> None:
    """Weight archive plus a ``key = value`` sidecar (epoch, config hash, RNG state, ...)."""
    save_weights(path, weights)
    lines = []
    for key, value in meta.items():
        text = json.dumps(value) if isinstance(value, (dict, list)) else str(value)
        if "\n" in text:
            raise ValueError(f"metadata value for {key!r} spans lines")
        lines.append(f"{key} = {text}")
    with open(meta_path(path), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_checkpoint_meta(path) -> dict[str, str]:
    out = {}
    with open(meta_path(path)) as fh:
        for line in fh:
            if line.strip():
                key, _, value = line.partition("=")
                out[key.strip()] = value.strip()
    return out
