"""Reference-segmentation machinery for the silhouette loss.

A look-up table of per-azimuth foreground masks is rebuilt periodically from
the current avatar (render -> decode -> segment); between rebuilds it is
immutable and supervises the soft silhouette through a mean-squared loss.
The builtin segmenter recovers the foreground by color distance to the known
composited background and stands in for a learned segmentation model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .decode import LinearDecoder, decode_linear
from .diffcore import F32, as_f32, bilinear_resize, bilinear_resize_backward
from .errors import SegmentationError, ShapeError
from .headmodel import ArticulationPose, AvatarState, HeadModel, posed_vertices
from .raster import BackgroundSpec, Camera, render_hi_lo

logger = logging.getLogger(__name__)

SEG_LAMBDA = 1000.0


@dataclass
class MaskLUT:
    """Per-azimuth reference masks, one per integer step in the range."""

    masks: np.ndarray  # [N,S,S] f32 in {0,1}
    azimuth_min: float = -30.0
    azimuth_max: float = 30.0
    step: float = 1.0
    built_at_iteration: int = 0

    def __post_init__(self):
        want = int(round((self.azimuth_max - self.azimuth_min) / self.step)) + 1
        if self.masks.shape[0] != want:
            raise ShapeError(f"LUT has {self.masks.shape[0]} masks, range needs {want}")

    @property
    def resolution(self) -> int:
        return self.masks.shape[1]

    def azimuths(self) -> np.ndarray:
        return self.azimuth_min + self.step * np.arange(self.masks.shape[0])

    def index_of(self, azimuth: float) -> int:
        idx = int(round((azimuth - self.azimuth_min) / self.step))
        if idx < 0 or idx >= self.masks.shape[0]:
            raise SegmentationError(f"azimuth {azimuth} outside LUT range "
                                    f"[{self.azimuth_min}, {self.azimuth_max}]")
        return idx

    def mask_for(self, azimuth: float) -> np.ndarray:
        return self.masks[self.index_of(azimuth)]


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def select_head_mask(candidate_masks, anchor_pixels) -> np.ndarray:
    """Largest candidate containing every anchor pixel (ties: lowest index)."""
    candidates = [np.asarray(m) > 0.5 for m in candidate_masks]
    if not candidates:
        raise SegmentationError("no candidate masks")
    anchors = np.asarray(anchor_pixels, dtype=np.int64).reshape(-1, 2)
    best = None
    best_count = -1
    for i, mask in enumerate(candidates):
        if not np.all(mask[anchors[:, 0], anchors[:, 1]]):
            continue
        count = int(mask.sum())
        if count > best_count:
            best, best_count = mask, count
    if best is None:
        raise SegmentationError(f"no candidate contains all {len(anchors)} anchor pixels")
    return best


def builtin_segmenter(rgb: np.ndarray, *, bg: BackgroundSpec, anchors=None,
                      azimuth: float | None = None, threshold: float = 0.1) -> np.ndarray:
    """Foreground by color distance to the known background, then largest
    connected component and hole filling."""
    rgb = as_f32(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"segmenter expects [3,H,W], got {rgb.shape}")
    h, w = rgb.shape[1:]
    bg_img = bg.image(h, w)
    dist = np.sqrt(np.sum((rgb.astype(np.float64) - bg_img) ** 2, axis=0))
    fg = dist > threshold
    if not fg.any():
        return fg
    labels, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=int))
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    largest = int(np.argmax(sizes)) + 1
    mask = labels == largest
    return ndimage.binary_fill_holes(mask)


def centroid_anchor_pixels(vertices: np.ndarray, camera: Camera, resolution: int, block: int = 3) -> np.ndarray:
    """3x3 pixel block at the projection of the mesh centroid."""
    centroid = np.asarray(vertices, dtype=np.float64).mean(axis=0, keepdims=True)
    ndc, _ = camera.project(centroid)
    col = int(np.floor((ndc[0, 0] + 1.0) / 2.0 * resolution))
    row = int(np.floor((1.0 - ndc[0, 1]) / 2.0 * resolution))
    half = block // 2
    rows = np.clip(np.arange(row - half, row + half + 1), 0, resolution - 1)
    cols = np.clip(np.arange(col - half, col + half + 1), 0, resolution - 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1)


@dataclass
class LutConfig:
    """How reference masks are produced: render geometry + decode + segment."""

    azimuth_min: float = -30.0
    azimuth_max: float = 30.0
    step: float = 1.0
    fov_deg: float = 25.0
    hi_resolution: int = 512
    lo_resolution: int = 64
    decoder: LinearDecoder | None = None
    background: BackgroundSpec = field(default_factory=lambda: BackgroundSpec(np.full(4, -2.0, np.float32)))
    iou_warn_threshold: float = 0.5


def build_mask_lut(
    model: HeadModel,
    state: AvatarState,
    segmenter,
    canonical_pose: ArticulationPose,
    config: LutConfig,
    iteration: int = 0,
    enlarge_offsets: np.ndarray | None = None,
) -> MaskLUT:
    """Render the current avatar at every azimuth (neutral expression/pose,
    zero elevation), decode to RGB, segment, and store the selected masks.

    `segmenter(rgb, *, bg, anchors, azimuth) -> bool mask`.  Any failure is
    collected and reported with the offending azimuths.
    """
    decoder = config.decoder or LinearDecoder(np.zeros((3, 4), F32), np.zeros(3, F32))
    azimuths = np.arange(config.azimuth_min, config.azimuth_max + config.step / 2, config.step)
    bg_rgb = config.background.map_channels(
        lambda c: np.clip(decoder.weight @ as_f32(c) + decoder.bias, 0.0, 1.0))
    masks = []
    failures = []
    prev = None
    for az in azimuths:
        pose = ArticulationPose(
            psi=np.zeros(model.n_expression, F32),
            phi=np.zeros((model.n_joints, 3), F32),
            azimuth=float(az),
            elevation=0.0,
            radius=canonical_pose.radius,
        )
        camera = Camera.from_pose(pose, fov_deg=config.fov_deg, resolution=config.hi_resolution)
        f_lo, _ = render_hi_lo(model, state, pose, camera, config.lo_resolution,
                               background=config.background, enlarge_offsets=enlarge_offsets)
        rgb = decode_linear(decoder, f_lo)
        res = rgb.shape[1]
        posed = posed_vertices(model, state, pose, enlarge_offsets=enlarge_offsets)
        anchors = centroid_anchor_pixels(posed.vertices, camera, res)
        try:
            mask = segmenter(rgb, bg=bg_rgb, anchors=anchors, azimuth=float(az))
        except SegmentationError as exc:
            failures.append((float(az), str(exc)))
            continue
        mask = np.asarray(mask)
        if mask.shape != (res, res):
            failures.append((float(az), f"mask shape {mask.shape}, expected {(res, res)}"))
            continue
        mask_f = (mask > 0.5).astype(F32)
        if prev is not None:
            iou = mask_iou(prev, mask_f)
            if iou < config.iou_warn_threshold:
                logger.warning("mask LUT: inter-azimuth IoU %.3f below %.2f at azimuth %s",
                               iou, config.iou_warn_threshold, az)
        prev = mask_f
        masks.append(mask_f)
    if failures:
        listing = ", ".join(f"{az:g} ({msg})" for az, msg in failures[:8])
        raise SegmentationError(f"LUT build failed for {len(failures)} azimuth(s): {listing}")
    return MaskLUT(np.stack(masks), config.azimuth_min, config.azimuth_max, config.step, iteration)


def seg_loss(lut: MaskLUT, soft_mask: np.ndarray, azimuth: float, seg_lambda: float = SEG_LAMBDA):
    """lambda-scaled MSE between the reference mask and the upsampled soft
    mask; returns (loss, adjoint for the soft mask)."""
    ref = lut.mask_for(azimuth).astype(np.float64)
    soft = as_f32(soft_mask)
    s = lut.resolution
    up = bilinear_resize(soft[None], s, s)[0].astype(np.float64)
    diff = up - ref
    loss = seg_lambda * float(np.mean(diff * diff))
    d_up = (2.0 * seg_lambda / diff.size) * diff
    d_soft = bilinear_resize_backward((1,) + soft.shape, d_up[None].astype(F32))[0]
    return loss, d_soft
