"""Checkpoint container: JSON header + raw little-endian float32 payload.

Layout:  8-byte little-endian uint64 header length, UTF-8 JSON header, then
the concatenated float32 payloads.  The header stores tensor names, shapes
and byte offsets (relative to the payload start) plus a free-form ``meta``
dict.  Keys are sorted and the float payload is written verbatim, so the same
state always produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT = "compoundmotion-checkpoint-v1"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = {}
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {"format": FORMAT, "tensors": entries, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    if header.get("format") != FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    payload = raw[8 + hlen :]
    arrays = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        arrays[name] = arr.reshape(shape).astype(np.float32)
    return arrays, header["meta"]
