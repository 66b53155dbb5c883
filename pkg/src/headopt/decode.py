"""Feature image -> RGB decoding.

The built-in decoder is a per-pixel affine map followed by a bilinear 8x
upsample and a clamp to [0,1]; it keeps the engine self-contained.  A real
learned decoder can be reached through the wire protocol instead.  Decoding
sits outside the gradient path: guidance operates on feature images, so no
decoder backward pass exists.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .diffcore import as_f32, bilinear_resize
from .errors import DecodeError, ShapeError

UPSAMPLE_FACTOR = 8


@dataclass
class LinearDecoder:
    weight: np.ndarray  # [3,4]
    bias: np.ndarray  # [3]
    upsample_factor: int = UPSAMPLE_FACTOR

    def __post_init__(self):
        self.weight = as_f32(self.weight)
        self.bias = as_f32(self.bias)
        if self.weight.shape != (3, 4) or self.bias.shape != (3,):
            raise ShapeError(f"decoder weight {self.weight.shape} / bias {self.bias.shape}")


def decode_linear(dec: LinearDecoder, feature_image: np.ndarray) -> np.ndarray:
    """Affine map per pixel, bilinear upsample, clamp to [0,1]."""
    f = as_f32(feature_image)
    if f.ndim != 3 or f.shape[0] != 4:
        raise ShapeError(f"decoder input must be [4,h,w], got {f.shape}")
    rgb = np.einsum("cf,fhw->chw", dec.weight, f) + dec.bias[:, None, None]
    h, w = f.shape[1] * dec.upsample_factor, f.shape[2] * dec.upsample_factor
    return np.clip(bilinear_resize(rgb, h, w), 0.0, 1.0)


def save_decoder_config(path, dec: LinearDecoder) -> None:
    Path(path).write_text(json.dumps({"weight": dec.weight.tolist(), "bias": dec.bias.tolist()}, indent=2))


def load_decoder_config(path) -> LinearDecoder:
    try:
        obj = json.loads(Path(path).read_text())
        return LinearDecoder(np.asarray(obj["weight"], np.float32), np.asarray(obj["bias"], np.float32))
    except (KeyError, ValueError, TypeError) as exc:
        raise DecodeError(f"bad decoder config {path}: {exc}") from exc


def default_decoder() -> LinearDecoder:
    """Approximate 4-channel-latent -> RGB projection shipped with the package."""
    text = resources.files("headopt").joinpath("data/decoder_default.json").read_text()
    obj = json.loads(text)
    return LinearDecoder(np.asarray(obj["weight"], np.float32), np.asarray(obj["bias"], np.float32))


def decode_remote(client, feature_image: np.ndarray) -> np.ndarray:
    """Decode through the wire protocol; response is shape-validated.

    `client` is a ProtocolClient; transport failures surface as DecodeError
    carrying the retry count.
    """
    f = as_f32(feature_image)
    if f.ndim != 3 or f.shape[0] != 4:
        raise ShapeError(f"decoder input must be [4,h,w], got {f.shape}")
    rgb = client.decode(f)
    want = (3, f.shape[1] * UPSAMPLE_FACTOR, f.shape[2] * UPSAMPLE_FACTOR)
    if rgb.shape != want:
        raise DecodeError(f"remote decoder returned {rgb.shape}, expected {want}")
    return rgb
