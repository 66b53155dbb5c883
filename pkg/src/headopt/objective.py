"""Per-step objective assembly.

Texture steps blend the rendered feature image with a shading-cue image
before guidance; geometry steps combine the silhouette loss with three
regularizers (offset magnitude, Laplacian smoothness, region-weighted
Laplacian prior).  Gradient routing is strict: guidance gradients reach only
the texture, geometry losses reach only (mlp, beta, features).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decode import LinearDecoder
from .diffcore import F32, as_f32
from .errors import ShapeError
from .headmodel import (
    ArticulationPose,
    AvatarState,
    HeadModel,
    posed_vertices,
    uniform_laplacian,
    uniform_laplacian_transpose,
)
from .raster import Camera, RasterSettings, render_soft_mask
from .segmask import MaskLUT, seg_loss

# region weighting for the Laplacian prior, indexed by region label code
# (other, scalp, face, forehead)
DEFAULT_REGION_SCALE = (1.0, 0.1, 0.5, 0.5)


@dataclass
class RegWeights:
    lambda1: float = 0.5  # offset magnitude
    lambda2: float = 5000.0  # Laplacian smoothness
    lambda3: float = 5000.0  # Laplacian prior
    seg_lambda: float = 1000.0
    region_scale: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_REGION_SCALE, np.float32))

    def __post_init__(self):
        self.region_scale = as_f32(self.region_scale)
        if min(self.lambda1, self.lambda2, self.lambda3, self.seg_lambda) < 0:
            raise ShapeError("loss weights must be non-negative")


@dataclass
class AlphaSchedule:
    """Blend weight between the feature render and the shading cue."""

    ramp_iters: int = 4000
    post_lo: float = 0.6
    post_hi: float = 1.0

    def __post_init__(self):
        if not (0 <= self.post_lo <= self.post_hi <= 1):
            raise ShapeError("post-ramp range must be inside [0,1]")


def alpha_at(schedule: AlphaSchedule, iteration: int, rng: np.random.Generator) -> float:
    """Linear ramp iteration/ramp_iters, then uniform in [post_lo, post_hi]."""
    if iteration < schedule.ramp_iters:
        return iteration / schedule.ramp_iters
    return float(rng.uniform(schedule.post_lo, schedule.post_hi))


def shaded_to_features(shaded: np.ndarray, decoder: LinearDecoder | None = None) -> np.ndarray:
    """Map a [3,h,w] shaded render into the 4-channel feature value range.

    When the linear decoder is invertible (rank 3) the pseudo-inverse of its
    affine map is used, so decoding the result approximately reproduces the
    shaded image; otherwise the grey image is replicated to 4 channels at
    unit scale.
    """
    shaded = as_f32(shaded)
    if shaded.ndim != 3 or shaded.shape[0] != 3:
        raise ShapeError(f"shaded image must be [3,h,w], got {shaded.shape}")
    if decoder is not None and np.linalg.matrix_rank(decoder.weight.astype(np.float64)) == 3:
        pinv = np.linalg.pinv(decoder.weight.astype(np.float64))  # [4,3]
        feat = np.einsum("fc,chw->fhw", pinv, shaded.astype(np.float64) - decoder.bias[:, None, None])
        return as_f32(feat)
    return np.concatenate([shaded, shaded[:1]], axis=0)


def blend_guidance_input(feature_image: np.ndarray, shaded_features: np.ndarray, alpha: float) -> np.ndarray:
    """Convex combination alpha*F + (1-alpha)*shading-cue.

    d(blended)/dF = alpha exactly, so a guidance gradient g pulls back to
    alpha * g on the feature image.
    """
    f = as_f32(feature_image)
    s = as_f32(shaded_features)
    if f.shape != s.shape:
        raise ShapeError(f"blend shapes differ: {f.shape} vs {s.shape}")
    a = np.float32(alpha)
    return a * f + (np.float32(1.0) - a) * s


# ---------------------------------------------------------------------------
# Geometry regularizers: each returns (value, adjoint)
# ---------------------------------------------------------------------------


def loss_off(offsets: np.ndarray):
    """Mean absolute offset component; offsets are measured from the
    un-enlarged base mesh at the current expression, so the template
    enlargement itself is penalized alongside the MLP output."""
    off = as_f32(offsets)
    n = off.size
    value = float(np.sum(np.abs(off, dtype=np.float64)) / n)
    grad = (np.sign(off) / np.float32(n)).astype(F32)
    return value, grad


def loss_lap(adjacency, vertices: np.ndarray):
    """Mean L1 norm of uniform-Laplacian rows."""
    v = as_f32(vertices)
    lap = uniform_laplacian(adjacency, v)
    nv = v.shape[0]
    value = float(np.sum(np.abs(lap, dtype=np.float64)) / nv)
    d_lap = np.sign(lap) / np.float32(nv)
    return value, uniform_laplacian_transpose(adjacency, d_lap)


def loss_prior(adjacency, vertices: np.ndarray, template_vertices: np.ndarray,
               region_labels: np.ndarray, region_scale: np.ndarray):
    """Region-weighted squared L2 difference between the mesh Laplacian and
    the un-enlarged template's Laplacian, averaged over vertices."""
    v = as_f32(vertices)
    lap_v = uniform_laplacian(adjacency, v)
    lap_t = uniform_laplacian(adjacency, as_f32(template_vertices))
    diff = lap_v - lap_t
    scale = as_f32(region_scale)[np.asarray(region_labels)]
    nv = v.shape[0]
    value = float(np.sum(scale[:, None] * diff.astype(np.float64) ** 2) / nv)
    d_diff = (2.0 / nv) * scale[:, None] * diff
    return value, uniform_laplacian_transpose(adjacency, d_diff)


@dataclass
class GeometryLossResult:
    total: float
    parts: dict  # seg (lambda-scaled), off, lap, prior (raw values)
    mlp_grads: object
    d_beta: np.ndarray
    d_features: np.ndarray
    soft_mask: np.ndarray


def total_geometry_loss(
    model: HeadModel,
    state: AvatarState,
    lut: MaskLUT,
    azimuth: float,
    weights: RegWeights,
    soft_settings: RasterSettings,
    *,
    enlarge_offsets: np.ndarray | None = None,
    radius: float = 0.7,
    fov_deg: float = 25.0,
) -> GeometryLossResult:
    """Silhouette + geometry regularizers at the canonical expression/pose.

    Backward produces adjoints only for the geometry variables (mlp, beta,
    features); the texture is untouched by construction.
    """
    pose = ArticulationPose.canonical(model, azimuth=azimuth, radius=radius)
    posed = posed_vertices(model, state, pose, enlarge_offsets=enlarge_offsets)
    camera = Camera.from_pose(pose, fov_deg=fov_deg, resolution=soft_settings.resolution or 64)
    faces = model.effective_faces()
    mask, mask_backward = render_soft_mask(posed.vertices, faces, camera, soft_settings)
    l_seg, d_mask = seg_loss(lut, mask, azimuth, weights.seg_lambda)
    d_verts_seg = mask_backward(d_mask)

    adj = model.adjacency()
    l_lap, d_verts_lap = loss_lap(adj, posed.vertices)
    l_prior, d_verts_prior = loss_prior(adj, posed.vertices, model.template,
                                        model.region_labels, weights.region_scale)
    offsets_from_base = posed.offsets if enlarge_offsets is None else posed.offsets + as_f32(enlarge_offsets)
    l_off, d_off = loss_off(offsets_from_base)

    total = l_seg + weights.lambda1 * l_off + weights.lambda2 * l_lap + weights.lambda3 * l_prior
    d_vertices = (d_verts_seg
                  + np.float32(weights.lambda2) * d_verts_lap
                  + np.float32(weights.lambda3) * d_verts_prior)
    mlp_grads, d_beta, d_features = posed.backward(
        d_vertices, d_offsets=np.float32(weights.lambda1) * d_off)
    return GeometryLossResult(
        total=total,
        parts={"seg": l_seg, "off": l_off, "lap": l_lap, "prior": l_prior},
        mlp_grads=mlp_grads,
        d_beta=d_beta,
        d_features=d_features,
        soft_mask=mask,
    )
