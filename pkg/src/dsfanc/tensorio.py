"""Binary tensor files and JSON sidecar manifests.

Layout (little-endian)::

    magic   8 bytes  b"DSFTNSR\\0"
    version u32      1
    dtype   4 bytes  b"f32\\0" or b"f64\\0"
    rank    u32
    dims    rank x u64
    data    C-order raw values
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSFTNSR\0"
VERSION = 1
_DTYPES = {b"f32\0": np.dtype("<f4"), b"f64\0": np.dtype("<f8")}
_TAGS = {v: k for k, v in _DTYPES.items()}


class TensorFormatError(ValueError):
    pass


def write_tensor(path, array, dtype: str = "f64") -> str:
    """Write ``array`` and return the sha256 of the file bytes."""
    if dtype not in ("f32", "f64"):
        raise ValueError(f"dtype must be 'f32' or 'f64', got {dtype!r}")
    dt = np.dtype("<f4") if dtype == "f32" else np.dtype("<f8")
    arr = np.asarray(array, dtype=dt, order="C")
    header = MAGIC + struct.pack("<I", VERSION) + _TAGS[dt] + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    blob = header + arr.tobytes()
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def _parse_header(buf: bytes):
    if buf[:8] != MAGIC:
        raise TensorFormatError("bad magic bytes")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor version {version}")
    tag = buf[12:16]
    if tag not in _DTYPES:
        raise TensorFormatError(f"unknown dtype tag {tag!r}")
    (rank,) = struct.unpack_from("<I", buf, 16)
    if len(buf) < 20 + 8 * rank:
        raise TensorFormatError("truncated header dims")
    dims = struct.unpack_from(f"<{rank}Q", buf, 20)
    return _DTYPES[tag], tuple(int(d) for d in dims), 20 + 8 * rank


def read_tensor(path, mmap: bool = False) -> np.ndarray:
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(20)
        if len(head) < 20:
            raise TensorFormatError(f"{path}: truncated header")
        if head[:8] != MAGIC:
            raise TensorFormatError(f"{path}: bad magic bytes")
        rank = struct.unpack_from("<I", head, 16)[0]
        head += fh.read(8 * rank)
    dt, dims, offset = _parse_header(head)
    count = int(np.prod(dims)) if dims else 1
    if path.stat().st_size != offset + count * dt.itemsize:
        raise TensorFormatError(f"{path}: size does not match header dims {dims}")
    if mmap:
        return np.memmap(path, dtype=dt, mode="r", offset=offset, shape=dims)
    with path.open("rb") as fh:
        fh.seek(offset)
        return np.frombuffer(fh.read(), dtype=dt).reshape(dims).copy()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def write_manifest(path, manifest: dict) -> str:
    """Write ``manifest`` with a ``manifest_hash`` over its other keys."""
    body = {k: v for k, v in manifest.items() if k != "manifest_hash"}
    digest = canonical_hash(body)
    body["manifest_hash"] = digest
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return digest


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
