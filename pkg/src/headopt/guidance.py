"""Score-distillation guidance behind a pluggable provider interface.

A provider is a pure request -> response callable: feature image in,
feature-image gradient out.  The analytic target provider turns the whole
optimization loop into a problem with a known global optimum, so the engine
is verifiable without any pretrained model; the remote provider speaks the
wire protocol to a guidance server.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import as_f32
from .errors import GuidanceError, ShapeError
from .protocol import ProtocolClient

DEFAULT_CFG_SCALE = 100.0
DEFAULT_T_RANGE = (0.02, 0.98)


@dataclass
class GuidanceRequest:
    feature_image: np.ndarray  # [4,h,w]
    prompt: str = ""
    t_min: float = DEFAULT_T_RANGE[0]
    t_max: float = DEFAULT_T_RANGE[1]
    cfg_scale: float = DEFAULT_CFG_SCALE
    seed: int = 0

    def __post_init__(self):
        self.feature_image = as_f32(self.feature_image)
        if self.feature_image.ndim != 3:
            raise ShapeError(f"feature image must be [C,h,w], got {self.feature_image.shape}")
        if self.cfg_scale <= 0:
            raise ShapeError("cfg_scale must be positive")
        if not (0 <= self.t_min <= self.t_max <= 1):
            raise ShapeError("timestep range must satisfy 0 <= t_min <= t_max <= 1")


@dataclass
class GuidanceResponse:
    grad: np.ndarray  # same shape as the request feature image
    diagnostics: dict = field(default_factory=dict)


def sds_grad_formula(noise_pred: np.ndarray, eps: np.ndarray, w: float) -> np.ndarray:
    """Gradient of the score-distillation objective: (noise_pred - eps) / w."""
    if w == 0:
        raise GuidanceError("step size w must be non-zero")
    noise_pred = as_f32(noise_pred)
    eps = as_f32(eps)
    if noise_pred.shape != eps.shape:
        raise ShapeError(f"noise_pred {noise_pred.shape} vs eps {eps.shape}")
    return (noise_pred - eps) / np.float32(w)


class AnalyticTargetProvider:
    """Gradient of 0.5 * ||F - target||^2: the desk-scale guidance oracle."""

    def __init__(self, target: np.ndarray):
        self.target = as_f32(target)

    def __call__(self, request: GuidanceRequest) -> GuidanceResponse:
        f = request.feature_image
        if f.shape != self.target.shape:
            raise ShapeError(f"feature image {f.shape} vs target {self.target.shape}")
        grad = f - self.target
        return GuidanceResponse(grad, {"provider": "analytic", "residual": float(np.mean(grad**2))})


class MockNoiseProvider:
    """Deterministic pseudo-random gradients of bounded norm, keyed on
    (provider seed, request seed); protocol and loop smoke tests only."""

    def __init__(self, seed: int = 0, max_norm: float = 1.0):
        self.seed = int(seed)
        self.max_norm = float(max_norm)

    def __call__(self, request: GuidanceRequest) -> GuidanceResponse:
        rng = np.random.default_rng([self.seed, int(request.seed)])
        grad = rng.standard_normal(request.feature_image.shape).astype(np.float32)
        norm = float(np.linalg.norm(grad))
        if norm > self.max_norm:
            grad *= np.float32(self.max_norm / norm)
        return GuidanceResponse(grad, {"provider": "mock", "noise_norm": float(np.linalg.norm(grad))})


class RemoteProvider:
    """Serializes requests over the wire protocol; validates the response."""

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 2, client: ProtocolClient | None = None):
        self.client = client or ProtocolClient(endpoint, timeout=timeout, retries=retries)

    def __call__(self, request: GuidanceRequest) -> GuidanceResponse:
        grad, diagnostics = self.client.sds_grad(
            request.feature_image, request.prompt, request.cfg_scale,
            request.t_min, request.t_max, request.seed,
        )
        if not np.all(np.isfinite(grad)):
            raise GuidanceError("remote provider returned non-finite gradient")
        return GuidanceResponse(grad, diagnostics)
