"""Checkpoint container: JSON header followed by little-endian float64 arrays.

Layout::

    b"CDCDCKPT" | uint64 LE header length | header JSON (UTF-8) | payload

The header carries ``format_version``, caller metadata and a ``manifest`` of
``{name, shape, offset}`` entries whose byte offsets index into the payload in
order. Headers are serialised with sorted keys and no whitespace, so loading
and re-saving reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MAGIC = b"CDCDCKPT"
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def encode(meta: dict, arrays: dict) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=_LE_F64)
        arr = np.ascontiguousarray(arr).reshape(arr.shape)  # keeps 0-d arrays 0-d
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = dict(meta, format_version=FORMAT_VERSION, manifest=manifest, payload_bytes=offset)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def decode(data: bytes):
    """Return ``(meta, arrays)``; ``meta`` excludes the manifest bookkeeping."""
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    start = len(MAGIC) + 8
    if len(data) < start:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC):start])
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"incompatible checkpoint format version {version} (this build reads version {FORMAT_VERSION})"
        )
    payload = data[start + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"payload is {len(payload)} bytes, header declares {header['payload_bytes']}")
    arrays, expected = {}, 0
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * math.prod(shape)
        if entry["offset"] != expected:
            raise CheckpointError(f"manifest offset mismatch at {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(payload, _LE_F64, math.prod(shape), expected).reshape(shape).astype(np.float64)
        expected += nbytes
    if expected != len(payload):
        raise CheckpointError("manifest does not cover the payload")
    meta = {k: v for k, v in header.items() if k not in ("format_version", "manifest", "payload_bytes")}
    return meta, arrays


def save(path, meta: dict, arrays: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(meta, arrays))
    tmp.replace(path)


def load(path):
    return decode(Path(path).read_bytes())
