"""Binary container: JSON header followed by raw little-endian float64 arrays.

Layout::

    b"GGODE\\x00\\x01\\x00"          8-byte magic
    uint64 little-endian          header length in bytes
    UTF-8 JSON header             {"version", "kind", "arrays": [{name, shape, offset}], ...}
    payload                       float64 little-endian arrays, offsets relative
                                  to the start of the payload

Datasets, parameter checkpoints and rollout exports all use this layout.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GGODE\x00\x01\x00"
VERSION = 1


class FormatError(ValueError):
    """Malformed, truncated or version-mismatched container file."""


def write_container(path, kind: str, arrays: list[tuple[str, np.ndarray]], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = {"version": VERSION, "kind": kind, "arrays": entries, "payload_bytes": offset}
    if meta:
        header["meta"] = meta
    raw = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def read_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(meta, arrays)``; raises ``FormatError`` on any inconsistency."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from None
    if header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')!r}")
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} file, found {header.get('kind')!r}")
    payload = blob[16 + hlen:]
    if len(payload) != header.get("payload_bytes"):
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {header.get('payload_bytes')} bytes)")
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = e["offset"]
        if start + 8 * n > len(payload):
            raise FormatError(f"{path}: array {e['name']!r} exceeds payload")
        flat = np.frombuffer(payload, dtype="<f8", count=n, offset=start)
        arrays[e["name"]] = flat.reshape(e["shape"]).astype(np.float64)
    return header.get("meta", {}), arrays
