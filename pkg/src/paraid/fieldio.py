"""Plain binary dumps of nodal fields.

Layout: a 16-byte header (12-byte magic, little-endian uint32 version), the
two dimensions as little-endian uint64, then the values as row-major
little-endian float64.  A ``.txt`` sidecar with ``key=value`` lines carries
free-form metadata.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["write_field", "read_field", "read_sidecar", "MAGIC", "VERSION"]

MAGIC = b"PARAIDFIELD\x00"
VERSION = 1
_HEADER = struct.Struct("<12sI")
_DIMS = struct.Struct("<QQ")


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".txt")


def write_field(path, values, metadata: dict | None = None) -> Path:
    path = Path(path)
    arr = np.asarray(values, dtype="<f8")
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError("field dumps hold 2-D arrays")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION))
        fh.write(_DIMS.pack(*arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes(order="C"))
    meta = {"rows": arr.shape[0], "cols": arr.shape[1], "dtype": "float64-le", "order": "row-major"}
    meta.update(metadata or {})
    _sidecar(path).write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return path


def read_field(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + _DIMS.size:
        raise ValueError(f"{path}: truncated field dump")
    magic, version = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a field dump")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    rows, cols = _DIMS.unpack_from(data, _HEADER.size)
    body = data[_HEADER.size + _DIMS.size:]
    if len(body) != 8 * rows * cols:
        raise ValueError(f"{path}: expected {rows}x{cols} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(float)


def read_sidecar(path) -> dict:
    out = {}
    for line in _sidecar(Path(path)).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
