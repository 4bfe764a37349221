"""Binary tensor container.

Layout::

    [0:8)        little-endian u64 header length L
    [8:8+L)      UTF-8 JSON: name -> {"dtype", "shape", "offset", "nbytes"}
    [8+L:)       contiguous little-endian payload; offsets are relative to it

Only ``f32`` and ``u32`` are stored. An optional ``"__metadata__"`` entry
holds a flat string -> string map. Names are written in sorted order and the
JSON is emitted compactly with sorted keys, so saving the same tensors twice
yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

DTYPES = {"f32": np.dtype("<f4"), "u32": np.dtype("<u4")}
META_KEY = "__metadata__"


def _dtype_name(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f32"
    if arr.dtype.kind in "ui" or arr.dtype.kind == "b":
        return "u32"
    raise FormatError(f"unsupported dtype {arr.dtype}")


def encode_container(tensors: dict, metadata: dict | None = None) -> bytes:
    header: dict = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        if name == META_KEY:
            raise FormatError(f"'{META_KEY}' is reserved")
        arr = np.asarray(tensors[name])
        kind = _dtype_name(arr)
        if kind == "u32" and arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
            raise FormatError(f"tensor '{name}' does not fit in u32")
        data = np.ascontiguousarray(arr.astype(DTYPES[kind])).tobytes()
        header[name] = {"dtype": kind, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
        chunks.append(data)
        offset += len(data)
    if metadata:
        header[META_KEY] = {str(k): str(v) for k, v in metadata.items()}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def decode_container(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if len(buf) < 8:
        raise FormatError("truncated header length", offset=len(buf))
    (hlen,) = struct.unpack("<Q", buf[:8])
    if 8 + hlen > len(buf):
        raise FormatError(f"header length {hlen} exceeds file size {len(buf)}", offset=8)
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}", offset=8) from None
    if not isinstance(header, dict):
        raise FormatError("header is not a JSON object", offset=8)
    metadata = header.pop(META_KEY, {})
    if not isinstance(metadata, dict):
        raise FormatError("metadata is not an object", offset=8)
    base = 8 + hlen
    payload_len = len(buf) - base
    entries = []
    for name, entry in header.items():
        try:
            dtype = DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            off = int(entry["offset"])
            nbytes = int(entry["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"malformed header entry for '{name}'", offset=8) from None
        if any(s < 0 for s in shape) or off < 0 or nbytes < 0:
            raise FormatError(f"negative size in entry '{name}'", offset=8)
        if int(np.prod(shape, dtype=np.int64)) * dtype.itemsize != nbytes:
            raise FormatError(f"entry '{name}': nbytes {nbytes} inconsistent with shape {list(shape)}", offset=8)
        entries.append((off, nbytes, name, dtype, shape))
    entries.sort()
    tensors = {}
    expected = 0
    for off, nbytes, name, dtype, shape in entries:
        if off != expected:
            raise FormatError(f"entry '{name}' starts at {off}, expected {expected}", offset=base + off)
        if off + nbytes > payload_len:
            raise FormatError(f"payload truncated inside '{name}'", offset=base + payload_len)
        tensors[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=base + off).reshape(shape).copy()
        expected = off + nbytes
    if expected != payload_len:
        raise FormatError(f"{payload_len - expected} trailing bytes after payload", offset=base + expected)
    return tensors, {str(k): str(v) for k, v in metadata.items()}


def save_container(path, tensors: dict, metadata: dict | None = None) -> None:
    path = Path(path)
    data = encode_container(tensors, metadata)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_container(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"no such container: {path}") from None
    return decode_container(buf)


def git_blob_hash(data: bytes) -> str:
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def file_hash(path) -> str:
    return git_blob_hash(Path(path).read_bytes())
