"""Segmentation backend for /v1/segment.

Candidate masks come from connected components of the pixels that differ
from the declared background; the returned mask is the largest candidate
containing every anchor pixel, hole-filled.  A learned segmentation model
can replace the candidate generator while keeping the same selection rule.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage


class SegmentError(ValueError):
    pass


def background_image(bg: dict, h: int, w: int) -> np.ndarray:
    """Render the declared background: uniform color or checkerboard."""
    kind = bg.get("kind", "uniform")
    color = np.asarray(bg.get("color", [0.0, 0.0, 0.0]), np.float32).reshape(-1)
    if kind == "uniform":
        return np.broadcast_to(color[:, None, None], (len(color), h, w)).copy()
    if kind == "checker":
        color2 = np.asarray(bg.get("color2"), np.float32).reshape(-1)
        box = max(1, int(round(bg.get("box_size_512", 20) * h / 512.0)))
        rows = (np.arange(h) // box)[:, None]
        cols = (np.arange(w) // box)[None, :]
        parity = ((rows + cols) % 2).astype(bool)
        return np.where(parity[None], color2[:, None, None], color[:, None, None]).astype(np.float32)
    raise SegmentError(f"unknown background kind {kind!r}")


def candidate_masks(rgb: np.ndarray, bg: dict, threshold: float = 0.1) -> list[np.ndarray]:
    """Connected components of foreground pixels, hole-filled, each a
    candidate mask (solid regions, like a learned segmenter would emit)."""
    h, w = rgb.shape[1:]
    bg_img = background_image(bg, h, w)
    if bg_img.shape[0] != rgb.shape[0]:
        raise SegmentError(f"background has {bg_img.shape[0]} channels, image {rgb.shape[0]}")
    dist = np.sqrt(np.sum((rgb.astype(np.float64) - bg_img) ** 2, axis=0))
    fg = dist > threshold
    if not fg.any():
        return []
    labels, n = ndimage.label(fg, structure=np.ones((3, 3), int))
    return [ndimage.binary_fill_holes(labels == i) for i in range(1, n + 1)]


def select_mask(candidates, anchors) -> np.ndarray:
    """Largest candidate containing every anchor pixel (ties: lowest index)."""
    if not candidates:
        raise SegmentError("no candidate masks")
    anchors = np.asarray(anchors, np.int64).reshape(-1, 2)
    best = None
    best_count = -1
    for mask in candidates:
        mask = np.asarray(mask) > 0.5
        if anchors.size and not np.all(mask[anchors[:, 0], anchors[:, 1]]):
            continue
        count = int(mask.sum())
        if count > best_count:
            best, best_count = mask, count
    if best is None:
        raise SegmentError(f"no candidate contains all {len(anchors)} anchor pixels")
    return best


def segment(rgb: np.ndarray, bg: dict, anchors=None, threshold: float = 0.1) -> np.ndarray:
    """Full pipeline: solid candidates -> anchored selection."""
    candidates = candidate_masks(rgb, bg, threshold)
    if anchors is None or len(anchors) == 0:
        if not candidates:
            raise SegmentError("image contains no foreground")
        sizes = [int(np.sum(c)) for c in candidates]
        return candidates[int(np.argmax(sizes))]
    return select_mask(candidates, anchors)
