"""BIOPHV01 container for volumes and checkpoints, plus PGM slice export.

Layout::

    b"BIOPHV01"                     8-byte magic
    uint32 little-endian            length of the JSON header in bytes
    UTF-8 JSON header
    float64 little-endian payload   row-major, channel-major

Volume headers carry ``dims``, ``channels``, ``spacing`` and ``dtype``.
Checkpoint headers add a ``tensors`` table of contents with a name, shape and
element offset for every stored array.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BIOPHV01"
DTYPE = "f64le"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _dump(path, header: dict, payload: np.ndarray):
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = np.ascontiguousarray(payload, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(data.tobytes())


def _load(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n].decode("utf-8"))
    if header.get("dtype") != DTYPE:
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    payload = np.frombuffer(raw[12 + n:], dtype="<f8").astype(np.float64)
    return header, payload


def write_volume(path, volume: np.ndarray, spacing: float = 1.0, **extra):
    """Write a (C, H, W, D) or (H, W, D) array."""
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim == 3:
        v = v[None]
    if v.ndim != 4:
        raise FormatError(f"volume must be 3-D or 4-D, got shape {v.shape}")
    header = {"kind": "volume", "dims": list(v.shape[1:]), "channels": v.shape[0],
              "spacing": float(spacing), "dtype": DTYPE, "version": FORMAT_VERSION}
    header.update(extra)
    _dump(path, header, v)


def read_volume(path):
    """Return ``(array of shape (C, H, W, D), header)``."""
    header, payload = _load(path)
    shape = (header["channels"], *header["dims"])
    if payload.size != int(np.prod(shape)):
        raise FormatError(f"{path}: payload holds {payload.size} values, header implies {shape}")
    return payload.reshape(shape), header


def write_tensors(path, tensors: dict[str, np.ndarray], **meta):
    """Named-tensor container (checkpoints)."""
    toc, chunks, offset = [], [], 0
    for name in sorted(tensors):
        a = np.asarray(tensors[name], dtype=np.float64)
        toc.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.ravel())
        offset += a.size
    header = {"kind": "checkpoint", "dtype": DTYPE, "version": FORMAT_VERSION,
              "dims": [offset], "channels": 1, "spacing": 1.0, "tensors": toc}
    header.update(meta)
    payload = np.concatenate(chunks) if chunks else np.zeros(0)
    _dump(path, header, payload)


def read_tensors(path):
    header, payload = _load(path)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint")
    out = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        out[entry["name"]] = payload[entry["offset"]:entry["offset"] + n].reshape(entry["shape"]).copy()
    return out, header


def slice_to_pgm(image: np.ndarray) -> bytes:
    """8-bit binary PGM; intensities are min-max scaled, constant images map to 128."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        px = np.round((img - lo) / (hi - lo) * 255.0)
    else:
        px = np.full(img.shape, 128.0)
    rows, cols = img.shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + px.astype(np.uint8).tobytes()


def export_slice(volume: np.ndarray, path, channel: int = 0, index: int | None = None):
    """Write the axial (last-axis) slice ``index`` of one channel as PGM."""
    v = np.asarray(volume)
    if v.ndim == 3:
        v = v[None]
    ch = v[channel]
    k = ch.shape[2] // 2 if index is None else index
    data = slice_to_pgm(ch[:, :, k])
    Path(path).write_bytes(data)
    return data
