"""Binary field container, JSON sidecars and CSV writers.

Container layout (all integers little-endian)::

    magic      4 bytes   b"CFLD"
    version    uint16
    dtype      uint8     8 = complex64, 16 = complex128
    role       16 bytes  ASCII tag, NUL padded (e.g. b"family", b"metric")
    m, n, k    3 x uint32
    twist      (2m)^2 x int32, row-major antisymmetric twist matrix
    ndim       uint32
    shape      ndim x uint32
    payload    row-major complex values

The JSON sidecar ``<file>.json`` records how the field was produced
(seed, generating operation and any extra keys).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

MAGIC = b"CFLD"
VERSION = 1
_DTYPES = {8: np.dtype("<c8"), 16: np.dtype("<c16")}


class ContainerError(ValueError):
    pass


@dataclass
class FieldRecord:
    m: int
    n: int
    k: int
    twist: np.ndarray
    role: str
    data: np.ndarray
    provenance: Optional[Dict] = None


def write_field(path, data: np.ndarray, *, m: int, n: int, k: int, twist, role: str,
                single: bool = False, provenance: Optional[Dict] = None) -> Path:
    path = Path(path)
    tw = np.asarray(twist, dtype=np.int64)
    if tw.shape != (2 * m, 2 * m):
        raise ContainerError(f"twist must be {2 * m}x{2 * m}, got {tw.shape}")
    tag = role.encode("ascii")
    if len(tag) > 16:
        raise ContainerError(f"role tag {role!r} longer than 16 bytes")
    code = 8 if single else 16
    arr = np.ascontiguousarray(np.asarray(data), dtype=_DTYPES[code])
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HB16s3I", VERSION, code, tag, m, n, k))
        fh.write(tw.astype("<i4").tobytes())
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(np.asarray(arr.shape, dtype="<u4").tobytes())
        fh.write(arr.tobytes(order="C"))
    if provenance is not None:
        write_json(path.with_name(path.name + ".json"), dict(provenance, role=role))
    return path


def read_field(path) -> FieldRecord:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path} is not a field container (bad magic)")
    off = 4
    version, code, tag, m, n, k = struct.unpack_from("<HB16s3I", raw, off)
    off += struct.calcsize("<HB16s3I")
    if version != VERSION or code not in _DTYPES:
        raise ContainerError(f"{path}: unsupported version {version} or dtype code {code}")
    d = 2 * m
    twist = np.frombuffer(raw, dtype="<i4", count=d * d, offset=off).reshape(d, d).astype(np.int64)
    off += 4 * d * d
    (ndim,) = struct.unpack_from("<I", raw, off)
    off += 4
    shape = tuple(int(s) for s in np.frombuffer(raw, dtype="<u4", count=ndim, offset=off))
    off += 4 * ndim
    dt = _DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    if len(raw) - off != count * dt.itemsize:
        raise ContainerError(f"{path}: payload size does not match shape {shape}")
    data = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(shape).copy()
    side = path.with_name(path.name + ".json")
    prov = json.loads(side.read_text()) if side.exists() else None
    return FieldRecord(m, n, k, twist, tag.rstrip(b"\0").decode("ascii"), data, prov)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(key): _jsonable(v) for key, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def format_value(v) -> str:
    """Deterministic CSV cell: repr-exact floats, empty string for missing."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if np.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[Dict]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([format_value(r.get(c)) for c in columns])
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
