"""Versioned binary container for named float32 arrays.

One format backs clip archives, checkpoints, and signature exports: a magic
tag, a JSON header describing the payload, then the raw little-endian float32
array bytes in header order. The JSON/raw-float split keeps files language
neutral and makes round-trips bit-exact, which the persistence tests rely on.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ArchiveCorruptError, ArchiveVersionError

MAGIC = b"GDFC"
CONTAINER_VERSION = 1


def write_container(
    path: str | Path,
    kind: str,
    meta: dict[str, Any],
    arrays: dict[str, np.ndarray],
) -> None:
    """Write named float32 arrays plus JSON metadata to `path`.

    Args:
        path: Destination file.
        kind: Free-form payload tag (e.g. "clip", "checkpoint", "signatures").
        meta: JSON-serializable metadata stored in the header.
        arrays: Name -> array. Every array is stored as little-endian float32;
            inputs must already be float32 so persistence is bit-exact.

    Raises:
        ValueError: if any array is not float32.
    """
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise ValueError(f"container arrays must be float32, got {arr.dtype} for {name!r}")
        entries.append({"name": name, "dtype": "float32", "shape": list(arr.shape)})
        blobs.append(arr.astype("<f4", copy=False).tobytes(order="C"))

    header = {
        "container_version": CONTAINER_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def read_container(
    path: str | Path,
    expected_kind: str | None = None,
) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Read a container, returning (meta, arrays).

    Raises:
        ArchiveCorruptError: truncated file, bad magic, or malformed header.
        ArchiveVersionError: container written with an unsupported version.
        ValueError: `expected_kind` given and the stored kind differs.
    """
    path = Path(path)
    if not path.exists():
        raise ArchiveCorruptError(f"{path}: file not found")
    data = path.read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise ArchiveCorruptError(f"{path}: not a gaitdis container (bad magic)")
    (header_len,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + header_len:
        raise ArchiveCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveCorruptError(f"{path}: malformed header: {exc}") from exc

    version = header.get("container_version")
    if version != CONTAINER_VERSION:
        raise ArchiveVersionError(
            f"{path}: container version {version!r} not supported (expected {CONTAINER_VERSION})"
        )
    kind = header.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise ValueError(f"{path}: expected kind {expected_kind!r}, found {kind!r}")

    arrays: dict[str, np.ndarray] = {}
    offset = 8 + header_len
    for entry in header["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        blob = data[offset : offset + nbytes]
        if len(blob) != nbytes:
            raise ArchiveCorruptError(f"{path}: truncated payload for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise ArchiveCorruptError(f"{path}: {len(data) - offset} trailing bytes after payload")
    return header["meta"], arrays
