"""Versioned binary container shared by dataset and checkpoint files.

Byte layout (all integers little-endian)::

    0      8 bytes   magic (b"KPDATA\\0\\0" or b"KPCKPT\\0\\0")
    8      uint32    format version
    12     uint64    header length H
    20     H bytes   UTF-8 JSON header
    20+H   payload   arrays back to back, C order, little-endian

The header holds ``arrays``: a list of ``{name, dtype, shape, offset, nbytes}``
entries with offsets relative to the payload start, plus ``payload_nbytes``
and ``payload_crc32`` (zlib CRC-32 of the whole payload). Everything else in
the header is file-kind specific metadata.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class ContainerError(IOError):
    pass


class CorruptFileError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.kind in "fiu" else arr.dtype
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = dict(meta)
    header.update(arrays=entries, payload_nbytes=len(payload), payload_crc32=zlib.crc32(payload))
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, _PREFIX.pack(magic, FORMAT_VERSION, len(hbytes)) + hbytes + payload)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _PREFIX.size:
        raise CorruptFileError(f"{path}: file too short for header")
    got_magic, version, hlen = _PREFIX.unpack_from(data)
    if got_magic != magic:
        raise CorruptFileError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise CorruptFileError(f"{path}: truncated header")
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header ({exc})") from None
    payload = data[start:]
    if len(payload) != header.get("payload_nbytes"):
        raise CorruptFileError(f"{path}: payload is {len(payload)} bytes, header says {header.get('payload_nbytes')}")
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise CorruptFileError(f"{path}: payload checksum mismatch")
    arrays = {}
    for e in header.pop("arrays"):
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, arrays
