"""FastAPI application implementing the wire protocol.

Endpoints: POST /v1/sds_grad, /v1/decode, /v1/segment; GET /v1/health.
Malformed envelopes return 400; backend failures return 500 with a
diagnostic message.  Echo and analytic backends are deterministic given
(backend, seed, request).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import __version__
from .decoder import decode_linear, load_decoder
from .envelope import EnvelopeError, decode_tensor, encode_tensor
from .sds import load_pretrained_denoiser, sds_gradient, step_size
from .segment import SegmentError, segment


@dataclass
class ServerConfig:
    backend: str = "echo"  # echo | analytic | real
    target_path: str | None = None  # analytic target tensor (TNS1 file)
    model_path: str | None = None  # real backend weights
    decoder_config: str | None = None
    cfg_scale_default: float = 100.0
    w_mode: str = "sigma"  # sigma | one
    segment_threshold: float = 0.1
    denoiser: object = field(default=None, repr=False)  # injectable for tests

    def __post_init__(self):
        if self.backend not in ("echo", "analytic", "real"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "real" and self.model_path is None and self.denoiser is None:
            raise ValueError("backend 'real' requires model_path (or an injected denoiser)")
        if self.backend == "analytic" and self.target_path is None:
            raise ValueError("backend 'analytic' requires target_path")


_TNS_DTYPES = {"f32": "<f4", "f64": "<f8"}


def load_tns1(path) -> np.ndarray:
    """Read the engine's raw tensor dump (magic TNS1, dtype tag, dims, payload)."""
    raw = Path(path).read_bytes()
    if raw[:4] != b"TNS1":
        raise ValueError(f"{path}: not a TNS1 tensor file")
    off = 4
    (tag_len,) = struct.unpack_from("<B", raw, off)
    off += 1
    tag = raw[off:off + tag_len].decode("ascii")
    off += tag_len
    if tag not in _TNS_DTYPES:
        raise ValueError(f"{path}: unsupported dtype {tag!r}")
    (ndim,) = struct.unpack_from("<B", raw, off)
    off += 1
    shape = []
    for _ in range(ndim):
        (d,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape.append(d)
    arr = np.frombuffer(raw[off:], dtype=_TNS_DTYPES[tag])
    return arr.reshape(shape).astype(np.float32)


def create_app(config: ServerConfig | None = None) -> FastAPI:
    config = config or ServerConfig()
    app = FastAPI(title="headopt guidance server", version=__version__)

    target = load_tns1(config.target_path) if config.backend == "analytic" else None
    denoiser = config.denoiser
    if config.backend == "real" and denoiser is None:
        denoiser = load_pretrained_denoiser(config.model_path)
    dec_weight, dec_bias = load_decoder(config.decoder_config)

    def bad_request(msg: str):
        return JSONResponse(status_code=400, content={"error": msg})

    def backend_failure(msg: str):
        return JSONResponse(status_code=500, content={"error": msg})

    @app.post("/v1/sds_grad")
    async def handle_sds_grad(request: Request):
        try:
            payload = await request.json()
        except Exception:
            return bad_request("body is not valid JSON")
        try:
            feature = decode_tensor(payload, expect_ndim=3)
        except EnvelopeError as exc:
            return bad_request(str(exc))
        prompt = str(payload.get("prompt", ""))
        seed = int(payload.get("seed", 0))
        t_min = float(payload.get("t_min", 0.02))
        t_max = float(payload.get("t_max", 0.98))
        cfg_scale = float(payload.get("cfg_scale", config.cfg_scale_default))
        if not (0.0 <= t_min <= t_max <= 1.0):
            return bad_request(f"bad timestep range [{t_min}, {t_max}]")

        if config.backend == "echo":
            grad = -feature
            diagnostics = {"backend": "echo"}
        elif config.backend == "analytic":
            if feature.shape != target.shape:
                return bad_request(f"feature shape {feature.shape} != target {target.shape}")
            grad = feature - target
            diagnostics = {"backend": "analytic", "residual": float(np.mean(grad**2))}
        else:
            rng = np.random.default_rng(seed)
            t = float(rng.uniform(t_min, t_max))
            w = step_size(t, config.w_mode)
            eps = rng.standard_normal(feature.shape).astype(np.float32)
            try:
                grad = sds_gradient(feature, prompt, t, w, eps, denoiser, cfg_scale)
            except Exception as exc:  # backend failure -> 500 with diagnostic
                return backend_failure(f"denoiser failed: {exc}")
            diagnostics = {"backend": "real", "timestep": t, "w": w,
                           "noise_norm": float(np.linalg.norm(eps))}
        if not np.all(np.isfinite(grad)):
            return backend_failure("gradient is non-finite")
        return {"grad": encode_tensor(grad), "diagnostics": diagnostics}

    @app.post("/v1/decode")
    async def handle_decode(request: Request):
        try:
            payload = await request.json()
        except Exception:
            return bad_request("body is not valid JSON")
        try:
            feature = decode_tensor(payload, expect_ndim=3)
        except EnvelopeError as exc:
            return bad_request(str(exc))
        if feature.shape[0] != 4:
            return bad_request(f"decode input must be [4,h,w], got {feature.shape}")
        rgb = decode_linear(feature, dec_weight, dec_bias)
        return {"rgb": encode_tensor(rgb), "diagnostics": {"backend": config.backend}}

    @app.post("/v1/segment")
    async def handle_segment(request: Request):
        try:
            payload = await request.json()
        except Exception:
            return bad_request("body is not valid JSON")
        try:
            rgb = decode_tensor(payload, expect_ndim=3)
        except EnvelopeError as exc:
            return bad_request(str(exc))
        if rgb.shape[0] != 3:
            return bad_request(f"segment input must be [3,H,W], got {rgb.shape}")
        bg = payload.get("bg", {"kind": "uniform", "color": [0.0, 0.0, 0.0]})
        anchors = payload.get("anchors")
        try:
            mask = segment(rgb, bg, anchors, threshold=config.segment_threshold)
        except SegmentError as exc:
            return backend_failure(str(exc))
        return {"mask": encode_tensor(mask.astype(np.float32)),
                "diagnostics": {"backend": config.backend, "pixels": int(mask.sum())}}

    @app.get("/v1/health")
    async def handle_health():
        return {"backend": config.backend, "version": __version__}

    return app
