"""Wire protocol shared by the guidance, decode and segment remote paths.

HTTP/1.1 POST with a JSON envelope.  Tensors travel as base64 of the raw
little-endian float32 row-major buffer:

    {"shape": [4, 64, 64], "dtype": "f32", "data": "<base64>"}

Endpoints:

* ``/v1/sds_grad``  request: flat tensor envelope + ``prompt``, ``cfg_scale``,
  ``t_min``, ``t_max``, ``seed``; response: ``{"grad": <tensor>,
  "diagnostics": {...}}``.
* ``/v1/decode``    request: flat tensor envelope ([4,h,w]); response:
  ``{"rgb": <tensor [3,8h,8w]>, "diagnostics": {...}}``.
* ``/v1/segment``   request: flat tensor envelope ([3,H,W]) + optional
  ``anchors`` ([[row, col], ...]) and ``bg`` ({"kind", "color", "color2",
  "box_size_512"}); response: ``{"mask": <tensor [H,W]>, "diagnostics":
  {...}}``.

Non-200 responses are errors.  The round trip is bit-exact for float32
tensors.
"""
from __future__ import annotations

import base64
import json

import numpy as np
import requests

from .errors import DecodeError, GuidanceError, ProtocolError, SegmentationError


def encode_tensor(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": [int(d) for d in arr.shape],
        "dtype": "f32",
        "data": base64.b64encode(arr.tobytes(order="C")).decode("ascii"),
    }


def decode_tensor(obj, expect_shape=None) -> np.ndarray:
    if not isinstance(obj, dict):
        raise ProtocolError(f"tensor envelope must be an object, got {type(obj).__name__}")
    missing = [k for k in ("shape", "dtype", "data") if k not in obj]
    if missing:
        raise ProtocolError(f"tensor envelope missing keys: {missing}")
    if obj["dtype"] != "f32":
        raise ProtocolError(f"unsupported dtype {obj['dtype']!r}")
    try:
        raw = base64.b64decode(obj["data"], validate=True)
    except Exception as exc:
        raise ProtocolError(f"bad base64 payload: {exc}") from exc
    shape = tuple(int(d) for d in obj["shape"])
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if len(raw) != count * 4:
        raise ProtocolError(f"payload is {len(raw)} bytes, shape {shape} needs {count * 4}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if expect_shape is not None and arr.shape != tuple(expect_shape):
        raise ProtocolError(f"tensor shape {arr.shape}, expected {tuple(expect_shape)}")
    return arr


class ProtocolClient:
    """Synchronous client with bounded retries; one request in flight."""

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 2, session=None):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self._session = session or requests.Session()

    def _post(self, path: str, payload: dict, error_cls):
        url = f"{self.endpoint}{path}"
        attempts = 0
        last = None
        while attempts <= self.retries:
            try:
                resp = self._session.post(url, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last = f"transport: {exc}"
                attempts += 1
                continue
            if resp.status_code != 200:
                raise error_cls(f"{url} returned {resp.status_code}: {resp.text[:200]}", retries=attempts)
            try:
                return resp.json()
            except json.JSONDecodeError as exc:
                last = f"bad json: {exc}"
                attempts += 1
        raise error_cls(f"{url} failed after {attempts} attempt(s): {last}", retries=attempts)

    def sds_grad(self, feature_image: np.ndarray, prompt: str, cfg_scale: float,
                 t_min: float, t_max: float, seed: int):
        payload = encode_tensor(feature_image)
        payload.update(prompt=prompt, cfg_scale=float(cfg_scale),
                       t_min=float(t_min), t_max=float(t_max), seed=int(seed))
        obj = self._post("/v1/sds_grad", payload, GuidanceError)
        if "grad" not in obj:
            raise GuidanceError("response missing 'grad'")
        try:
            grad = decode_tensor(obj["grad"], expect_shape=feature_image.shape)
        except ProtocolError as exc:
            raise GuidanceError(f"bad grad tensor: {exc}") from exc
        return grad, obj.get("diagnostics", {})

    def decode(self, feature_image: np.ndarray) -> np.ndarray:
        obj = self._post("/v1/decode", encode_tensor(feature_image), DecodeError)
        if "rgb" not in obj:
            raise DecodeError("response missing 'rgb'")
        try:
            return decode_tensor(obj["rgb"])
        except ProtocolError as exc:
            raise DecodeError(f"bad rgb tensor: {exc}") from exc

    def segment(self, rgb: np.ndarray, anchors=None, bg: dict | None = None) -> np.ndarray:
        payload = encode_tensor(rgb)
        if anchors is not None:
            payload["anchors"] = [[int(r), int(c)] for r, c in anchors]
        if bg is not None:
            payload["bg"] = bg
        obj = self._post("/v1/segment", payload, SegmentationError)
        if "mask" not in obj:
            raise SegmentationError("response missing 'mask'")
        try:
            mask = decode_tensor(obj["mask"], expect_shape=rgb.shape[1:])
        except ProtocolError as exc:
            raise SegmentationError(f"bad mask tensor: {exc}") from exc
        return mask

    def health(self) -> dict:
        url = f"{self.endpoint}/v1/health"
        resp = self._session.get(url, timeout=self.timeout)
        if resp.status_code != 200:
            raise ProtocolError(f"{url} returned {resp.status_code}")
        return resp.json()
