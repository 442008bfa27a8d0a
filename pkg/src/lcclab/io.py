"""Binary tensor container shared by checkpoints, masks and recovery plans.

Layout::

    8 bytes   little-endian uint64: header length in bytes
    header    UTF-8 JSON object (sorted keys, compact separators)
    payload   tensors back to back, in manifest order

Each manifest entry carries ``name``, ``shape``, ``dtype`` and ``offset``
(bytes from the start of the payload).  ``f32``/``f64`` tensors are
little-endian IEEE floats; ``bits`` tensors are boolean arrays bit-packed with
``numpy.packbits`` (big bit order, zero padded to a whole byte).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["write_container", "read_container"]


def _encode(arr: np.ndarray, dtype: str) -> bytes:
    if dtype == "f32":
        return np.ascontiguousarray(arr, dtype="<f4").tobytes()
    if dtype == "f64":
        return np.ascontiguousarray(arr, dtype="<f8").tobytes()
    if dtype == "bits":
        return np.packbits(np.asarray(arr, dtype=bool).ravel()).tobytes()
    raise ValueError(f"unknown tensor dtype {dtype!r}")


def write_container(path, meta: dict, tensors: dict, dtype: str = "f32") -> Path:
    path = Path(path)
    manifest = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        blob = _encode(arr, dtype)
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": manifest}, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def read_container(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated container")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen].decode())
    payload = memoryview(raw)[8 + hlen :]
    out = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if entry["dtype"] == "f32":
            arr = np.frombuffer(payload[start : start + 4 * count], dtype="<f4").reshape(shape)
        elif entry["dtype"] == "f64":
            arr = np.frombuffer(payload[start : start + 8 * count], dtype="<f8").reshape(shape)
        elif entry["dtype"] == "bits":
            nbytes = (count + 7) // 8
            bits = np.unpackbits(np.frombuffer(payload[start : start + nbytes], dtype=np.uint8))[:count]
            arr = bits.astype(bool).reshape(shape)
        else:
            raise ValueError(f"{path}: unknown tensor dtype {entry['dtype']!r}")
        out[entry["name"]] = arr.copy()
    return header["meta"], out
