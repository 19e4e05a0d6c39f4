"""The "VTCK" tensor container shared by float and quantized checkpoints.

Layout (little-endian)::

    b"VTCK" | u32 version | u32 header_len | header JSON (utf-8) | payload

The header's ``tensors`` list gives each tensor's name, shape, dtype and
byte offset into the payload. JSON is written with sorted keys and no
whitespace so that identical content always serializes to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"VTCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")
DTYPES = {"f8": "<f8", "f4": "<f4", "i1": "|i1"}


def _dtype_tag(a: np.ndarray) -> str:
    for tag, dt in DTYPES.items():
        if a.dtype == np.dtype(dt):
            return tag
    raise ValueError(f"unsupported tensor dtype {a.dtype}")


def encode(header: dict, tensors: dict[str, np.ndarray], tensor_extra: dict[str, dict] | None = None) -> bytes:
    tensor_extra = tensor_extra or {}
    directory = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
        entry = {"name": name, "shape": list(arr.shape), "dtype": tag, "offset": offset, "nbytes": len(raw)}
        entry.update(tensor_extra.get(name, {}))
        directory.append(entry)
        chunks.append(raw)
        offset += len(raw)
    full = dict(header)
    full["tensors"] = directory
    blob = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def decode(data: bytes, source: str = "<bytes>"):
    """Return ``(header, tensors)``; ``header["tensors"]`` keeps the directory."""
    if len(data) < _PREFIX.size:
        raise FormatError(f"{source}: truncated checkpoint (no header)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise FormatError(f"{source}: truncated checkpoint header")
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{source}: corrupt header JSON ({e})") from None
    payload = memoryview(data)[start:]
    tensors = {}
    expected = 0
    for entry in header.get("tensors", []):
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise FormatError(f"{source}: truncated payload for tensor {entry['name']!r}")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype=DTYPES[entry["dtype"]])
        n = int(np.prod(entry["shape"], dtype=np.int64))
        if arr.size != n:
            raise FormatError(f"{source}: tensor {entry['name']!r} has {arr.size} values, shape needs {n}")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
        expected = max(expected, end)
    if len(payload) != expected:
        raise FormatError(f"{source}: {len(payload) - expected} trailing bytes after payload")
    return header, tensors


def write(path, header: dict, tensors: dict[str, np.ndarray], tensor_extra=None) -> int:
    blob = encode(header, tensors, tensor_extra)
    Path(path).write_bytes(blob)
    return len(blob)


def read(path):
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: checkpoint not found")
    return decode(path.read_bytes(), str(path))


def header_size(blob: bytes) -> int:
    return _PREFIX.size + _PREFIX.unpack_from(blob)[2]
