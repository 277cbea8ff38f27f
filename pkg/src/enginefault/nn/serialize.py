"""Binary parameter files.

Layout: 8-byte magic, little-endian u64 header length, UTF-8 JSON header,
then every array as little-endian float32 in header order. The header lists
``name``/``shape``/``offset`` per array and a SHA-256 of the payload.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EFPARAM1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated or schema-incompatible parameter file."""


def write_params(path, arrays: dict[str, np.ndarray], extra: dict | None = None) -> None:
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "<f4",
        "entries": entries,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            fh.write(payload)
        tmp.replace(path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise OSError(f"cannot write parameter file {path}: {exc}") from exc


def read_params(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = raw[16 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: corrupt checkpoint, payload is {len(payload)} bytes, expected {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: corrupt checkpoint, checksum mismatch")
    arrays = {}
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return arrays, header["extra"]
