"""Versioned binary container shared by trajectories, windows and models.

Layout (all integers little-endian)::

    magic      4 bytes   b"VFDD"
    version    uint16    FORMAT_VERSION
    header_len uint32    length of the JSON header in bytes
    header     utf-8 JSON {"kind", "meta", "arrays": [{name, dtype, shape, offset, nbytes}]}
    payload    raw array bytes, C order, offsets relative to payload start

Array dtypes are stored explicitly (``<f4``, ``<f8``, ``<i4``, ``<i8``).
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VFDD"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_ALLOWED_DTYPES = {"<f4", "<f8", "<i4", "<i8", "|u1"}


class ContainerError(Exception):
    """Malformed or unreadable container."""


class VersionMismatchError(ContainerError):
    """Container written by an incompatible format version or of the wrong kind."""


class ConfigHashMismatchError(ContainerError):
    """Artifact was produced by a different configuration than the one in use."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def hash_obj(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def encode(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    specs = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "|" else arr.dtype
        if dt.str not in _ALLOWED_DTYPES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for array {name!r}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        specs.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = canonical_json({"kind": kind, "meta": meta, "arrays": specs}).encode()
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def decode(buf: bytes, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < _PREFIX.size:
        raise ContainerError("truncated container")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise ContainerError("bad magic")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"container version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    header = json.loads(buf[start:start + hlen].decode())
    if kind is not None and header["kind"] != kind:
        raise VersionMismatchError(f"container holds {header['kind']!r}, expected {kind!r}")
    payload = memoryview(buf)[start + hlen:]
    arrays = {}
    for spec in header["arrays"]:
        lo, hi = spec["offset"], spec["offset"] + spec["nbytes"]
        if hi > len(payload):
            raise ContainerError(f"array {spec['name']!r} runs past end of file")
        arr = np.frombuffer(payload[lo:hi], dtype=np.dtype(spec["dtype"]))
        arrays[spec["name"]] = arr.reshape(spec["shape"]).copy()
    meta = header["meta"]
    meta["_kind"] = header["kind"]
    return meta, arrays


def write(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(kind, meta, arrays))
    tmp.replace(path)


def read(path, kind: str | None = None, config_hash: str | None = None):
    """Read a container, optionally checking its kind and producing-config hash."""
    meta, arrays = decode(Path(path).read_bytes(), kind)
    if config_hash is not None and meta.get("config_hash") != config_hash:
        raise ConfigHashMismatchError(
            f"{path}: produced by config {meta.get('config_hash')}, current config is {config_hash}")
    return meta, arrays


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
