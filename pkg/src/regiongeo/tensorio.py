"""Tensor file format.

One UTF-8 JSON header line, e.g. ``{"dims": [4, 4, 3], "dtype": "f32",
"order": "row-major"}``, followed by the raw little-endian IEEE-754 payload.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_DTYPES = {"f32": "<f4", "f64": "<f8"}


def write_tensor(path, array, dtype: str = "f32") -> None:
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    array = np.asarray(array)
    header = {"dims": list(array.shape), "dtype": dtype, "order": "row-major"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a tensor file; values are returned as float64."""
    raw = Path(path).read_bytes()
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline].decode("utf-8"))
    if header.get("order", "row-major") != "row-major":
        raise ValueError(f"unsupported order {header['order']!r}")
    dtype = _DTYPES.get(header["dtype"])
    if dtype is None:
        raise ValueError(f"unsupported dtype {header['dtype']!r}")
    dims = [int(d) for d in header["dims"]]
    payload = np.frombuffer(raw[newline + 1:], dtype=dtype)
    expected = int(np.prod(dims)) if dims else 1
    if payload.size != expected:
        raise ValueError(f"{path}: payload has {payload.size} values, header declares {expected}")
    return payload.reshape(dims).astype(np.float64)
