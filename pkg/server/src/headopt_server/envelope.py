"""JSON tensor envelope: base64 of raw little-endian float32, row-major.

    {"shape": [4, 64, 64], "dtype": "f32", "data": "<base64>"}

The round trip is bit-exact.  Decoding failures raise EnvelopeError, which
the endpoints translate to HTTP 400.
"""
from __future__ import annotations

import base64

import numpy as np


class EnvelopeError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": [int(d) for d in arr.shape],
        "dtype": "f32",
        "data": base64.b64encode(arr.tobytes(order="C")).decode("ascii"),
    }


def decode_tensor(obj, expect_ndim: int | None = None) -> np.ndarray:
    if not isinstance(obj, dict):
        raise EnvelopeError("tensor envelope must be a JSON object")
    for key in ("shape", "dtype", "data"):
        if key not in obj:
            raise EnvelopeError(f"tensor envelope missing {key!r}")
    if obj["dtype"] != "f32":
        raise EnvelopeError(f"unsupported dtype {obj['dtype']!r}")
    try:
        shape = tuple(int(d) for d in obj["shape"])
    except (TypeError, ValueError) as exc:
        raise EnvelopeError(f"bad shape: {exc}") from exc
    if any(d < 0 for d in shape):
        raise EnvelopeError(f"negative dimension in shape {shape}")
    try:
        raw = base64.b64decode(obj["data"], validate=True)
    except Exception as exc:
        raise EnvelopeError(f"bad base64 payload: {exc}") from exc
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if len(raw) != 4 * count:
        raise EnvelopeError(f"payload has {len(raw)} bytes, shape {shape} needs {4 * count}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if expect_ndim is not None and arr.ndim != expect_ndim:
        raise EnvelopeError(f"tensor has {arr.ndim} dims, expected {expect_ndim}")
    return arr
