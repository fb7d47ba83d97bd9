"""Binary container shared by datasets and checkpoints.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"STEFNET\\x00"
    offset 8   4 bytes   uint32 header length n
    offset 12  n bytes   UTF-8 JSON header, keys sorted
    offset 12+n          payload: raw arrays back to back, C order

The header carries caller metadata plus two reserved keys:

``arrays``
    list of ``{"name", "dtype", "shape", "offset", "nbytes"}`` where
    ``dtype`` is a numpy little-endian type string (``"<f8"``, ``"<i8"``,
    ``"|u1"``) and ``offset`` is relative to the payload start.
``payload_crc32``
    CRC-32 of the whole payload, checked on read.

Writing the same metadata and arrays always produces the same bytes.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"STEFNET\x00"
_RESERVED = ("arrays", "payload_crc32")


class ContainerError(ValueError):
    """Raised for unreadable, truncated or corrupted container files."""


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def write_container(path, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    for key in _RESERVED:
        if key in meta:
            raise ValueError(f"metadata key {key!r} is reserved")
    blobs = []
    entries = []
    offset = 0
    for name, arr in arrays.items():
        arr = _le(np.asarray(arr))
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = dict(meta)
    header["arrays"] = entries
    header["payload_crc32"] = zlib.crc32(payload)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(metadata, arrays)``; raises :class:`ContainerError` on damage."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise ContainerError(f"{path}: not a stefnet container (bad magic or too short)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: header is not valid JSON") from exc
    payload = raw[12 + hlen:]
    entries = header.pop("arrays", None)
    crc = header.pop("payload_crc32", None)
    if entries is None or crc is None:
        raise ContainerError(f"{path}: header lacks array table")
    expected = sum(e["nbytes"] for e in entries)
    if len(payload) != expected:
        raise ContainerError(f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    if zlib.crc32(payload) != crc:
        raise ContainerError(f"{path}: payload checksum mismatch")
    arrays = {}
    for e in entries:
        dt = np.dtype(e["dtype"])
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=dt).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return header, arrays
