"""Versioned on-disk parameter container.

Layout: an ASCII magic line, a line with the byte length of the header, the
header itself (human-readable JSON: format version, metadata, and a named
array manifest with shapes and payload offsets), one blank line, then the
concatenated raw little-endian float64 array payloads. Round-trips are
bit-exact by construction.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"DUALVQA-CKPT 1\n"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float64 arrays plus JSON-serializable metadata."""
    manifest = []
    offset = 0
    names = sorted(arrays)
    for name in names:
        arr = arrays[name]
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta,
        "arrays": manifest,
        "payload_bytes": offset,
    }
    header_bytes = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(header_bytes)}\n".encode("ascii"))
        fh.write(header_bytes)
        fh.write(b"\n")
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, meta). Raises ValueError on a malformed file."""
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        try:
            header_len = int(fh.readline().strip())
        except ValueError as exc:
            raise ValueError(f"{path}: bad header length") from exc
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version")
        fh.read(1)  # separator newline
        payload = fh.read(header["payload_bytes"])
    if len(payload) != header["payload_bytes"]:
        raise ValueError(f"{path}: truncated payload")
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64, copy=True)
        if not np.all(np.isfinite(arrays[entry["name"]])):
            raise ValueError(f"{path}: array {entry['name']} has non-finite entries")
    return arrays, header["meta"]
