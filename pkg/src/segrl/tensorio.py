"""Flat binary container for named float32 arrays.

Layout, in file order:

1. magic bytes ``b"SEGRLTNS"`` (8 bytes)
2. format version, uint32 little-endian (currently 1)
3. header length in bytes, uint64 little-endian
4. header: UTF-8 JSON object with two keys, in this order:
   ``meta`` (free-form string-keyed dict) and ``arrays`` (list sorted by
   name; each entry has fields ``name``, ``shape``, ``dtype``, ``offset``,
   ``nbytes``, in that order; ``offset`` is relative to the start of the
   payload)
5. payload: the raw C-order array bytes, concatenated
6. trailing integrity checksum: raw 32-byte SHA-256 of everything before it

Readers verify magic, version and checksum before trusting any content, so
truncation or bit corruption anywhere in the file is detected.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import CheckpointIntegrityError, CheckpointVersionError, DataIOError

MAGIC = b"SEGRLTNS"
VERSION = 1
_DIGEST_BYTES = 32


def write_tensors(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float32)
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": dict(meta or {}), "arrays": entries},
                        separators=(",", ":")).encode()
    body = (MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(header))
            + header + b"".join(blobs))
    digest = hashlib.sha256(body).digest()
    try:
        with open(path, "wb") as fh:
            fh.write(body)
            fh.write(digest)
    except OSError as exc:
        raise DataIOError(f"cannot write tensor file {path}: {exc}") from exc


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataIOError(f"cannot read tensor file {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 4 + 8 + _DIGEST_BYTES:
        raise CheckpointIntegrityError(f"{path}: file too short to be a tensor container")
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointIntegrityError(f"{path}: bad magic bytes")
    body, digest = raw[:-_DIGEST_BYTES], raw[-_DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch (file corrupt)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} is not supported (expected {VERSION})")
    (header_len,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    if pos + header_len > len(body):
        raise CheckpointIntegrityError(f"{path}: header overruns file")
    try:
        header = json.loads(body[pos:pos + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"{path}: malformed header: {exc}") from exc
    payload = body[pos + header_len:]
    arrays = {}
    for entry in header.get("arrays", []):
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointIntegrityError(
                f"{path}: array {entry['name']!r} overruns payload")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=np.float32)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header.get("meta", {})
