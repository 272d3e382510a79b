"""Array bundle files: a text manifest followed by raw little-endian blocks.

Layout::

    LMFNET-ARRAYS 1
    META <json>                  (one line, optional metadata)
    <name>\t<dtype>\t<d0,d1,...>  (one line per array, in storage order)
    END
    <row-major little-endian bytes of each array, in manifest order>

Used both for parameter checkpoints (with optimiser state) and for feature
dumps.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = "LMFNET-ARRAYS 1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "u1"}


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    lines = [MAGIC, "META " + json.dumps(meta or {}, sort_keys=True)]
    blocks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise DataError(f"{name}: unsupported dtype {arr.dtype}")
        if any(c in name for c in "\t\n"):
            raise DataError(f"array name {name!r} contains whitespace control characters")
        lines.append(f"{name}\t{key}\t{','.join(str(d) for d in arr.shape)}")
        blocks.append(np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes())
    lines.append("END")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for b in blocks:
            fh.write(b)
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)`` in manifest order."""
    raw = Path(path).read_bytes()
    pos = 0
    header: list[str] = []
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise DataError(f"{path}: truncated manifest")
        line = raw[pos:nl].decode("utf-8")
        pos = nl + 1
        if line == "END":
            break
        header.append(line)
    if not header or header[0] != MAGIC:
        raise DataError(f"{path}: not an array bundle")
    meta: dict = {}
    arrays: dict[str, np.ndarray] = {}
    for line in header[1:]:
        if line.startswith("META "):
            meta = json.loads(line[5:])
            continue
        try:
            name, key, dims = line.split("\t")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            dt = np.dtype(_DTYPES[key])
        except (ValueError, KeyError) as exc:
            raise DataError(f"{path}: malformed manifest line {line!r}") from exc
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(raw):
            raise DataError(f"{path}: data block for {name!r} is truncated")
        arrays[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).astype(key)
        pos += nbytes
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes after last block")
    return arrays, meta
