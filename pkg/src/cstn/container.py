"""Versioned binary container shared by dataset caches and checkpoints.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic (e.g. b"CSTNDATA" or b"CSTNCKPT")
    8       4     uint32 format version
    12      32    SHA-256 digest of the canonical JSON of header["config"]
    44      8     uint64 header length L
    52      L     UTF-8 JSON header; header["tensors"] lists
                  {"name", "dtype", "shape"} in payload order
    52+L    ...   tensor payloads, C order, dtype as declared ("<f8", "<i8", "<i4")
    end-4   4     uint32 CRC-32 of every preceding byte

The digest lets a reader confirm the embedded config without trusting it,
and the trailing CRC catches truncation and bit rot.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptArtifactError, MissingInputError, VersionMismatchError

_DTYPES = {"<f8", "<i8", "<i4"}
_PREFIX = struct.Struct("<8sI32sQ")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_digest(config) -> bytes:
    return hashlib.sha256(canonical_json(config)).digest()


def encode(magic: bytes, version: int, header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    header = dict(header)
    entries = []
    payload = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _DTYPES:
            arr = arr.astype("<f8")
            dtype = "<f8"
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    header["tensors"] = entries
    hbytes = canonical_json(header)
    body = _PREFIX.pack(magic, version, config_digest(header.get("config")), len(hbytes))
    body += hbytes + b"".join(payload)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size + 4:
        raise CorruptArtifactError("file too short to be a container")
    got_magic, got_version, digest, hlen = _PREFIX.unpack_from(blob, 0)
    if got_magic != magic:
        raise CorruptArtifactError(f"bad magic {got_magic!r}, expected {magic!r}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise CorruptArtifactError("checksum mismatch (truncated or damaged file)")
    if got_version != version:
        raise VersionMismatchError(f"format version {got_version}, this build reads {version}")
    start = _PREFIX.size
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArtifactError(f"unreadable header: {exc}") from None
    if config_digest(header.get("config")) != digest:
        raise CorruptArtifactError("config digest does not match header")
    pos = start + hlen
    end = len(blob) - 4
    tensors = {}
    for entry in header.get("tensors", []):
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > end:
            raise CorruptArtifactError(f"payload for {entry['name']!r} runs past end of file")
        tensors[entry["name"]] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize,
                                               offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != end:
        raise CorruptArtifactError("trailing bytes after declared payload")
    return header, tensors


def write(path, magic: bytes, version: int, header: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(magic, version, header, tensors))


def read(path, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"no such file: {path}")
    return decode(path.read_bytes(), magic, version)
