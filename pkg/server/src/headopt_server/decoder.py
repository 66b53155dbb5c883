"""Latent -> RGB decoding for /v1/decode.

The shared linear-decoder config schema (JSON with "weight" [3x4] and
"bias" [3]) drives a per-pixel affine map, a bilinear 8x upsample
(align-corners=false) and a clamp to [0,1].  The real backend would run a
learned decoder instead.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

UPSAMPLE = 8

# identity-ish default: first three latent channels map to RGB around mid-grey
DEFAULT_WEIGHT = np.array([[1.0, 0.0, 0.0, 0.0],
                           [0.0, 1.0, 0.0, 0.0],
                           [0.0, 0.0, 1.0, 0.0]], np.float32)
DEFAULT_BIAS = np.array([0.5, 0.5, 0.5], np.float32)


def load_decoder(path: str | None):
    if path is None:
        return DEFAULT_WEIGHT, DEFAULT_BIAS
    obj = json.loads(Path(path).read_text())
    weight = np.asarray(obj["weight"], np.float32)
    bias = np.asarray(obj["bias"], np.float32)
    if weight.shape != (3, 4) or bias.shape != (3,):
        raise ValueError(f"decoder config: weight {weight.shape}, bias {bias.shape}")
    return weight, bias


def _resize_taps(n_in: int, n_out: int):
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(x).astype(np.int64)
    t = (x - i0).astype(np.float32)
    return np.clip(i0, 0, n_in - 1), np.clip(i0 + 1, 0, n_in - 1), t


def bilinear_upsample(img: np.ndarray, factor: int = UPSAMPLE) -> np.ndarray:
    c, h, w = img.shape
    y0, y1, ty = _resize_taps(h, h * factor)
    x0, x1, tx = _resize_taps(w, w * factor)
    rows = img[:, y0, :] * (1 - ty)[None, :, None] + img[:, y1, :] * ty[None, :, None]
    return rows[:, :, x0] * (1 - tx)[None, None, :] + rows[:, :, x1] * tx[None, None, :]


def decode_linear(feature_image: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    rgb = np.einsum("cf,fhw->chw", weight, feature_image.astype(np.float32)) + bias[:, None, None]
    return np.clip(bilinear_upsample(rgb), 0.0, 1.0)
