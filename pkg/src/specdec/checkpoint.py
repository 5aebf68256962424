"""Binary checkpoint container for named float32 tensors.

Layout: magic bytes ``EGLC``, a 4-byte little-endian unsigned format
version, a 4-byte little-endian header length, the UTF-8 JSON header, then
the raw little-endian float32 payloads.  The header holds a ``tensors``
list of ``{name, shape, offset}`` records (offsets relative to the payload
start) plus a free-form ``meta`` object (model config, draft input mode,
...).  Save -> load -> save round-trips byte-identically.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EGLC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised on malformed or incompatible checkpoint files."""


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float32 arrays plus metadata to ``path``.

    Tensor order in the file follows the dict's insertion order so repeated
    saves of the same state are byte-identical.
    """
    records = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise CheckpointError(f"tensor {name!r} contains non-finite values")
        raw = arr.astype("<f4", copy=False).tobytes()
        records.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(raw)
        offset += len(raw)
    header = {"meta": meta or {}, "tensors": records}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (name -> float32 array, meta)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header_len = struct.unpack("<I", blob[8:12])[0]
    header_end = 12 + header_len
    try:
        header = json.loads(blob[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    payload = blob[header_end:]
    tensors: dict[str, np.ndarray] = {}
    for rec in header["tensors"]:
        shape = tuple(int(s) for s in rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(rec["offset"])
        end = start + count * 4
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {rec['name']!r} payload out of range")
        flat = np.frombuffer(payload[start:end], dtype="<f4")
        tensors[rec["name"]] = flat.reshape(shape).astype(np.float32)
    return tensors, header.get("meta", {})
