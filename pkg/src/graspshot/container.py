"""Versioned binary container used for checkpoints, feature caches and
classifier bundles.

Layout: 4-byte magic, little-endian uint32 header length, UTF-8 JSON
header, then the raw array payload. Arrays are stored little-endian in
the order listed by the header; the header records a SHA-256 checksum of
the payload so truncation and corruption are detected on read. The
round-trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import CorruptFileError

_MAGIC = b"GSCT"
_FORMAT_VERSION = 1

# dtype codes allowed in the payload (all little-endian)
_DTYPES = {"<f8", "<f4", "<i8"}


def write_container(path, kind: str, meta: dict, arrays: dict) -> None:
    """Write ``arrays`` (name -> ndarray) plus JSON-serializable ``meta``."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = arr.dtype.newbyteorder("<").str
        if code not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        raw = np.ascontiguousarray(arr, dtype=code).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": code,
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format": kind,
        "version": _FORMAT_VERSION,
        "meta": meta,
        "arrays": entries,
        "payload_nbytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def read_container(path, expect_kind: str | None = None):
    """Read a container; returns ``(meta, arrays)``.

    Raises CorruptFileError on bad magic, truncation, or checksum
    mismatch; no partial result is returned.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != _MAGIC:
        raise CorruptFileError(f"{path}: not a graspshot container")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + header_len:
        raise CorruptFileError(f"{path}: truncated header")
    try:
        header = json.loads(blob[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header: {exc}") from exc
    payload = blob[8 + header_len:]
    if len(payload) != header["payload_nbytes"]:
        raise CorruptFileError(
            f"{path}: payload is {len(payload)} bytes, "
            f"header says {header['payload_nbytes']}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CorruptFileError(f"{path}: checksum mismatch")
    if expect_kind is not None and header["format"] != expect_kind:
        raise CorruptFileError(
            f"{path}: container holds {header['format']!r}, "
            f"expected {expect_kind!r}")
    arrays = {}
    for ent in header["arrays"]:
        start, n = ent["offset"], ent["nbytes"]
        arr = np.frombuffer(payload[start:start + n], dtype=ent["dtype"])
        arrays[ent["name"]] = arr.reshape(ent["shape"]).copy()
    return header["meta"], arrays
