"""Differentiable mesh rasterization.

Two render paths share one projection model:

* hard: z-buffered nearest-face rendering with perspective-correct
  barycentric UV lookup into the texture; gradients flow only into texture
  texels, never into vertices.
* soft: silhouette-probability mask where each face contributes
  sigmoid(sign * dist^2 / sigma) from its 2D screen-space signed distance,
  aggregated as 1 - prod(1 - d_f) over the nearest faces-per-pixel faces;
  differentiable with respect to vertex positions.

Geometry is evaluated in float64 internally; images and adjoints are
float32.  Per-pixel candidate faces are ordered by (depth, face index), so
output is bit-deterministic regardless of traversal parallelism.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import F32, as_f32, bilinear_resize, bilinear_resize_backward
from .errors import ConfigError, ShapeError
from .headmodel import ArticulationPose, AvatarState, HeadModel, posed_vertices

Z_CUT = 40.0  # sigmoid(|z| > 40) is 0/1 at float precision; bounds the blur band


@dataclass
class Camera:
    """Perspective camera on a sphere around the origin, look-at origin."""

    azimuth: float = 0.0  # degrees
    elevation: float = 0.0  # degrees
    radius: float = 0.7  # meters
    fov_deg: float = 25.0
    resolution: int = 512
    near: float = 0.01
    far: float = 10.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError("camera radius must be positive")
        if not (0 < self.fov_deg < 180):
            raise ConfigError("field of view must be in (0, 180) degrees")

    @classmethod
    def from_pose(cls, pose: ArticulationPose, fov_deg: float = 25.0, resolution: int = 512) -> "Camera":
        return cls(pose.azimuth, pose.elevation, pose.radius, fov_deg, resolution)

    def eye(self) -> np.ndarray:
        ea = np.deg2rad(self.azimuth)
        ee = np.deg2rad(self.elevation)
        return self.radius * np.array([np.sin(ea) * np.cos(ee), np.sin(ee), np.cos(ea) * np.cos(ee)])

    def axes(self):
        eye = self.eye()
        forward = -eye / np.linalg.norm(eye)
        up_hint = np.array([0.0, 1.0, 0.0])
        if abs(forward @ up_hint) > 0.999:
            up_hint = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up_hint)
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return right, up, forward

    def project(self, vertices: np.ndarray):
        """World vertices -> (ndc [V,2], depth [V]); depth is the distance
        along the viewing direction (positive in front of the camera)."""
        v = np.asarray(vertices, dtype=np.float64)
        right, up, forward = self.axes()
        rel = v - self.eye()
        w = rel @ forward
        k = 1.0 / np.tan(np.deg2rad(self.fov_deg) / 2.0)
        safe_w = np.where(np.abs(w) < 1e-12, 1e-12, w)
        ndc = np.stack([k * (rel @ right) / safe_w, k * (rel @ up) / safe_w], axis=1)
        return ndc, w

    def project_with_jac(self, vertices: np.ndarray):
        """Projection plus the per-vertex Jacobian rows d(ndc)/d(world)."""
        ndc, w = self.project(vertices)
        right, up, forward = self.axes()
        k = 1.0 / np.tan(np.deg2rad(self.fov_deg) / 2.0)
        safe_w = np.where(np.abs(w) < 1e-12, 1e-12, w)[:, None]
        jx = (k / safe_w) * right[None, :] - (ndc[:, 0:1] / safe_w) * forward[None, :]
        jy = (k / safe_w) * up[None, :] - (ndc[:, 1:2] / safe_w) * forward[None, :]
        return ndc, w, (jx, jy)


@dataclass
class RasterSettings:
    mode: str = "hard"  # "hard" | "soft"
    sigma: float = 1e-4
    gamma: float = 1e-4
    faces_per_pixel: int = 75
    resolution: int | None = None  # None -> camera resolution

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise ConfigError(f"unknown raster mode {self.mode!r}")
        if self.mode == "soft" and (self.sigma <= 0 or self.gamma <= 0 or self.faces_per_pixel < 1):
            raise ConfigError("soft mode requires sigma > 0, gamma > 0, faces_per_pixel >= 1")


@dataclass
class BackgroundSpec:
    """Uniform color or two-color checkerboard background."""

    color: np.ndarray  # [C]
    kind: str = "uniform"  # "uniform" | "checker"
    color2: np.ndarray | None = None
    box_size_512: int = 20  # box edge in pixels at the 512 reference resolution

    def __post_init__(self):
        self.color = as_f32(np.atleast_1d(self.color))
        if self.color2 is not None:
            self.color2 = as_f32(np.atleast_1d(self.color2))
        if self.kind == "checker":
            if self.color2 is None:
                raise ConfigError("checker background needs two colors")
            if not (1 <= self.box_size_512):
                raise ConfigError("checker box size must be >= 1")

    def image(self, h: int, w: int) -> np.ndarray:
        c = self.color.shape[0]
        if self.kind == "uniform":
            return np.broadcast_to(self.color[:, None, None], (c, h, w)).copy()
        box = max(1, int(round(self.box_size_512 * h / 512.0)))
        rows = (np.arange(h) // box)[:, None]
        cols = (np.arange(w) // box)[None, :]
        parity = ((rows + cols) % 2).astype(bool)
        out = np.where(parity[None], self.color2[:, None, None], self.color[:, None, None])
        return as_f32(out)

    def map_channels(self, fn) -> "BackgroundSpec":
        """New spec with per-channel colors transformed by `fn` (e.g. feature
        space -> RGB through the linear decoder)."""
        c2 = fn(self.color2) if self.color2 is not None else None
        return BackgroundSpec(fn(self.color), self.kind, c2, self.box_size_512)


@dataclass
class RenderOutput:
    feature_image: np.ndarray | None  # [C,H,W]
    hard_mask: np.ndarray  # [H,W] f32 in {0,1}
    soft_mask: np.ndarray | None = None  # [H,W] in [0,1]
    shaded: np.ndarray | None = None  # [3,H,W]
    depth: np.ndarray | None = None  # [H,W], +inf where empty
    n_degenerate: int = 0
    face_index: np.ndarray | None = None  # [H,W] i32, -1 where empty
    texture_backward: object = field(default=None, repr=False)


def _pixel_centers_ndc(res: int):
    xs = (np.arange(res, dtype=np.float64) + 0.5) / res * 2.0 - 1.0
    ys = 1.0 - (np.arange(res, dtype=np.float64) + 0.5) / res * 2.0
    return xs, ys


def _face_pixel_records(ndc: np.ndarray, depth_w: np.ndarray, faces: np.ndarray,
                        res: int, near: float, margin_ndc: float = 0.0):
    """Flatten (face, pixel-in-bounding-box) pairs into record arrays.

    Returns (rec_face, rec_row, rec_col, live_faces, n_culled) where culled
    counts near-plane-clipped and zero-area faces.  `margin_ndc` inflates the
    boxes (used by the soft path's blur band).
    """
    n_faces = len(faces)
    if n_faces == 0:
        z = np.zeros(0, np.int64)
        return z, z, z, np.zeros(0, bool), 0
    tri = ndc[faces]  # [F,3,2]
    w_tri = depth_w[faces]  # [F,3]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    live = (w_tri >= near).all(axis=1) & (area2 != 0.0)
    n_culled = int(n_faces - live.sum())
    px_per_ndc = res / 2.0
    lo = tri.min(axis=1) - margin_ndc
    hi = tri.max(axis=1) + margin_ndc
    ix0 = np.maximum(0, np.floor((lo[:, 0] + 1.0) * px_per_ndc - 0.5).astype(np.int64))
    ix1 = np.minimum(res - 1, np.ceil((hi[:, 0] + 1.0) * px_per_ndc - 0.5).astype(np.int64) + 1)
    iy0 = np.maximum(0, np.floor((1.0 - hi[:, 1]) * px_per_ndc - 0.5).astype(np.int64))
    iy1 = np.minimum(res - 1, np.ceil((1.0 - lo[:, 1]) * px_per_ndc - 0.5).astype(np.int64) + 1)
    on_screen = (hi[:, 0] >= -1.0) & (lo[:, 0] <= 1.0) & (hi[:, 1] >= -1.0) & (lo[:, 1] <= 1.0)
    usable = live & on_screen & (ix1 >= ix0) & (iy1 >= iy0)
    width = np.where(usable, ix1 - ix0 + 1, 0)
    height = np.where(usable, iy1 - iy0 + 1, 0)
    counts = width * height
    total = int(counts.sum())
    if total == 0:
        z = np.zeros(0, np.int64)
        return z, z, z, live, n_culled
    rec_face = np.repeat(np.arange(n_faces), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    j = np.arange(total) - np.repeat(offsets, counts)
    rec_row = iy0[rec_face] + j // width[rec_face]
    rec_col = ix0[rec_face] + j % width[rec_face]
    return rec_face, rec_row, rec_col, live, n_culled


def _hard_rasterize(ndc: np.ndarray, depth_w: np.ndarray, faces: np.ndarray, res: int, near: float):
    """Z-buffered coverage: returns (face_index, perspective-correct
    barycentrics, depth, n_degenerate).  Per-pixel candidates are resolved by
    (depth, face index), so the result is traversal-order independent."""
    faces = np.asarray(faces)
    face_idx = np.full((res, res), -1, np.int32)
    depth = np.full((res, res), np.inf)
    bary = np.zeros((res, res, 3))
    rec_face, rec_row, rec_col, live, n_culled = _face_pixel_records(ndc, depth_w, faces, res, near)
    if len(rec_face) == 0:
        return face_idx, bary, depth, n_culled

    xs, ys = _pixel_centers_ndc(res)
    tri = ndc[faces]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area2_f = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    X = xs[rec_col]
    Y = ys[rec_row]
    fa, fb, fc = a[rec_face], b[rec_face], c[rec_face]
    e0 = (fc[:, 0] - fb[:, 0]) * (Y - fb[:, 1]) - (fc[:, 1] - fb[:, 1]) * (X - fb[:, 0])
    e1 = (fa[:, 0] - fc[:, 0]) * (Y - fc[:, 1]) - (fa[:, 1] - fc[:, 1]) * (X - fc[:, 0])
    e2 = (fb[:, 0] - fa[:, 0]) * (Y - fa[:, 1]) - (fb[:, 1] - fa[:, 1]) * (X - fa[:, 0])
    area2 = area2_f[rec_face]
    pos = area2 > 0
    inside = np.where(pos, (e0 >= 0) & (e1 >= 0) & (e2 >= 0), (e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    if not inside.any():
        return face_idx, bary, depth, n_culled
    keep = np.nonzero(inside)[0]
    rec_face, rec_row, rec_col = rec_face[keep], rec_row[keep], rec_col[keep]
    l0 = e0[keep] / area2[keep]
    l1 = e1[keep] / area2[keep]
    l2 = e2[keep] / area2[keep]
    inv_w = 1.0 / depth_w[faces]  # [F,3]
    iw = inv_w[rec_face]
    denom = l0 * iw[:, 0] + l1 * iw[:, 1] + l2 * iw[:, 2]
    rec_depth = 1.0 / np.where(denom == 0, 1e-300, denom)
    front = rec_depth > 0
    rec_face, rec_row, rec_col = rec_face[front], rec_row[front], rec_col[front]
    rec_depth = rec_depth[front]
    pc = np.stack([l0[front] * iw[front, 0], l1[front] * iw[front, 1], l2[front] * iw[front, 2]],
                  axis=1) / denom[front][:, None]
    if len(rec_face) == 0:
        return face_idx, bary, depth, n_culled
    pix = rec_row * res + rec_col
    order = np.lexsort((rec_face, rec_depth, pix))
    pix_sorted = pix[order]
    first = np.flatnonzero(np.r_[True, pix_sorted[1:] != pix_sorted[:-1]])
    win = order[first]
    rows, cols = rec_row[win], rec_col[win]
    face_idx[rows, cols] = rec_face[win].astype(np.int32)
    depth[rows, cols] = rec_depth[win]
    bary[rows, cols] = pc[win]
    return face_idx, bary, depth, n_culled


def _sample_texture(texture: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Bilinear lookup at uv in [0,1]^2 (v up, edge clamp).

    Returns (samples [C,N], flat corner indices [N,4], weights [N,4]) so the
    adjoint can scatter back into texels.
    """
    c, th, tw = texture.shape
    tx = u * tw - 0.5
    ty = (1.0 - v) * th - 0.5
    x0 = np.floor(tx)
    y0 = np.floor(ty)
    fx = tx - x0
    fy = ty - y0
    x0i = np.clip(x0.astype(np.int64), 0, tw - 1)
    x1i = np.clip(x0.astype(np.int64) + 1, 0, tw - 1)
    y0i = np.clip(y0.astype(np.int64), 0, th - 1)
    y1i = np.clip(y0.astype(np.int64) + 1, 0, th - 1)
    idx = np.stack([y0i * tw + x0i, y0i * tw + x1i, y1i * tw + x0i, y1i * tw + x1i], axis=1)
    wts = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=1)
    flat = texture.reshape(c, -1)
    samples = np.einsum("cnk->cn", flat[:, idx] * wts[None])
    return samples, idx, wts


def render_features(
    vertices: np.ndarray,
    faces: np.ndarray,
    uv: np.ndarray,
    texture: np.ndarray,
    camera: Camera,
    settings: RasterSettings | None = None,
    background: BackgroundSpec | None = None,
) -> RenderOutput:
    """Hard render of the textured mesh into a feature image.

    Gradients flow only into the texture: the returned `texture_backward(dF)`
    scatters a feature-image adjoint back onto texels through the bilinear
    sampling weights.  Vertices receive no gradient on this path.
    """
    settings = settings or RasterSettings(mode="hard")
    res = settings.resolution or camera.resolution
    texture = as_f32(texture)
    if texture.ndim != 3:
        raise ShapeError(f"texture must be [C,H,W], got {texture.shape}")
    ndc, w = camera.project(vertices)
    face_idx, bary, depth, n_deg = _hard_rasterize(ndc, w, np.asarray(faces), res, camera.near)
    covered = face_idx >= 0
    n_ch = texture.shape[0]
    if background is not None:
        image = background.image(res, res).astype(F32)
        if image.shape[0] != n_ch:
            raise ShapeError(f"background has {image.shape[0]} channels, texture {n_ch}")
    else:
        image = np.zeros((n_ch, res, res), F32)

    rows, cols = np.nonzero(covered)
    if len(rows):
        fids = face_idx[rows, cols]
        vids = np.asarray(faces)[fids]
        uvw = bary[rows, cols]  # [N,3]
        uvs = np.asarray(uv, dtype=np.float64)[vids]  # [N,3,2]
        uv_px = np.einsum("nk,nkd->nd", uvw, uvs)
        samples, corner_idx, corner_w = _sample_texture(texture, uv_px[:, 0], uv_px[:, 1])
        image[:, rows, cols] = samples.astype(F32)
    else:
        corner_idx = np.zeros((0, 4), np.int64)
        corner_w = np.zeros((0, 4))

    tex_shape = texture.shape

    def texture_backward(d_image: np.ndarray) -> np.ndarray:
        d_image = as_f32(d_image)
        if d_image.shape != (n_ch, res, res):
            raise ShapeError(f"adjoint {d_image.shape}, expected {(n_ch, res, res)}")
        d_tex = np.zeros((n_ch, tex_shape[1] * tex_shape[2]), np.float64)
        if len(rows):
            dpix = d_image[:, rows, cols].astype(np.float64)  # [C,N]
            contrib = dpix[:, :, None] * corner_w[None]  # [C,N,4]
            for ch in range(n_ch):
                np.add.at(d_tex[ch], corner_idx.reshape(-1), contrib[ch].reshape(-1))
        return as_f32(d_tex.reshape(tex_shape))

    return RenderOutput(
        feature_image=image,
        hard_mask=covered.astype(F32),
        depth=depth.astype(F32),
        n_degenerate=n_deg,
        face_index=face_idx,
        texture_backward=texture_backward,
    )


# ---------------------------------------------------------------------------
# Soft silhouette mask
# ---------------------------------------------------------------------------


def _point_segment_d2(px, py, ax, ay, bx, by):
    """Squared distance from points to segment AB plus (t, rx, ry) for the
    gradient: d(d^2)/dA = -2(1-t) r, d(d^2)/dB = -2 t r with r = p - closest."""
    ex = bx - ax
    ey = by - ay
    ee = ex * ex + ey * ey
    vx = px - ax
    vy = py - ay
    t = np.clip((vx * ex + vy * ey) / np.where(ee < 1e-30, 1e-30, ee), 0.0, 1.0)
    rx = vx - t * ex
    ry = vy - t * ey
    return rx * rx + ry * ry, t, rx, ry


def render_soft_mask(
    vertices: np.ndarray,
    faces: np.ndarray,
    camera: Camera,
    settings: RasterSettings,
):
    """Soft silhouette: per-face influence sigmoid(sign * d^2 / sigma)
    aggregated as 1 - prod(1 - d_f) over the nearest `faces_per_pixel` faces
    (ordered by face-centroid depth, then face index).

    Returns (mask [H,W] f32, backward) where backward(d_mask) -> d_vertices.
    Log-space aggregation keeps saturated faces finite: log(1 - d_f) =
    -softplus(z_f), so mask = -expm1(-sum softplus(z)).
    """
    if settings.mode != "soft":
        raise ConfigError("render_soft_mask requires soft settings")
    res = settings.resolution or camera.resolution
    sigma = float(settings.sigma)
    ndc, w, (jx, jy) = camera.project_with_jac(vertices)
    faces = np.asarray(faces)
    xs, ys = _pixel_centers_ndc(res)
    margin = float(np.sqrt(Z_CUT * sigma))

    rec_face, rec_row, rec_col, _, _ = _face_pixel_records(ndc, w, faces, res, camera.near, margin)
    n_pix = res * res
    s_flat = np.zeros(n_pix)
    if len(rec_face):
        tri = ndc[faces]
        fa = tri[rec_face, 0]
        fb = tri[rec_face, 1]
        fc = tri[rec_face, 2]
        X = xs[rec_col]
        Y = ys[rec_row]
        d2s = np.empty((3, len(rec_face)))
        ts = np.empty_like(d2s)
        rxs = np.empty_like(d2s)
        rys = np.empty_like(d2s)
        for e, (p, q) in enumerate(((fa, fb), (fb, fc), (fc, fa))):
            d2s[e], ts[e], rxs[e], rys[e] = _point_segment_d2(X, Y, p[:, 0], p[:, 1], q[:, 0], q[:, 1])
        emin = np.argmin(d2s, axis=0)
        cols = np.arange(len(rec_face))
        d2 = d2s[emin, cols]

        e0 = (fc[:, 0] - fb[:, 0]) * (Y - fb[:, 1]) - (fc[:, 1] - fb[:, 1]) * (X - fb[:, 0])
        e1 = (fa[:, 0] - fc[:, 0]) * (Y - fc[:, 1]) - (fa[:, 1] - fc[:, 1]) * (X - fc[:, 0])
        e2 = (fb[:, 0] - fa[:, 0]) * (Y - fa[:, 1]) - (fb[:, 1] - fa[:, 1]) * (X - fa[:, 0])
        area2 = ((fb[:, 0] - fa[:, 0]) * (fc[:, 1] - fa[:, 1])
                 - (fb[:, 1] - fa[:, 1]) * (fc[:, 0] - fa[:, 0]))
        inside = np.where(area2 >= 0,
                          (e0 >= 0) & (e1 >= 0) & (e2 >= 0),
                          (e0 <= 0) & (e1 <= 0) & (e2 <= 0))
        z = np.where(inside, 1.0, -1.0) * d2 / sigma
        keep = np.nonzero(z > -Z_CUT)[0]
        pix = rec_row[keep] * res + rec_col[keep]
        facea = rec_face[keep]
        deptha = w[faces].mean(axis=1)[facea]  # face-centroid depth ordering
        za = z[keep]
        edgea = emin[keep]
        ta = ts[edgea, keep]
        ra = np.stack([rxs[edgea, keep], rys[edgea, keep]], axis=1)

        order = np.lexsort((facea, deptha, pix))
        pix, facea, za, edgea, ta, ra = (
            pix[order], facea[order], za[order], edgea[order], ta[order], ra[order])
        first = np.flatnonzero(np.r_[True, pix[1:] != pix[:-1]])
        counts = np.diff(np.r_[first, len(pix)])
        ranks = np.arange(len(pix)) - np.repeat(first, counts)
        kept = ranks < settings.faces_per_pixel
        pix, facea, za, edgea, ta, ra = pix[kept], facea[kept], za[kept], edgea[kept], ta[kept], ra[kept]
        np.add.at(s_flat, pix, np.logaddexp(0.0, za))
    else:
        pix = np.zeros(0, np.int64)
        facea = np.zeros(0, np.int64)
        za = np.zeros(0)
        edgea = np.zeros(0, np.int64)
        ta = np.zeros(0)
        ra = np.zeros((0, 2))

    mask = (-np.expm1(-s_flat)).reshape(res, res)
    n_vertices = len(vertices)
    edge_pairs = np.array([[0, 1], [1, 2], [2, 0]])

    def backward(d_mask: np.ndarray) -> np.ndarray:
        d_mask64 = np.asarray(d_mask, dtype=np.float64).reshape(-1)
        if d_mask64.shape[0] != n_pix:
            raise ShapeError(f"mask adjoint has {d_mask64.shape[0]} pixels, expected {n_pix}")
        d_ndc = np.zeros((n_vertices, 2))
        if len(pix):
            sig = 1.0 / (1.0 + np.exp(-np.clip(za, -500, 500)))
            dz = d_mask64[pix] * sig * np.exp(-s_flat[pix])
            dd2 = dz * np.sign(za) / sigma
            ga = (-2.0 * (1.0 - ta))[:, None] * ra * dd2[:, None]
            gb = (-2.0 * ta)[:, None] * ra * dd2[:, None]
            fverts = faces[facea]  # [N,3]
            va_ids = fverts[np.arange(len(facea)), edge_pairs[edgea][:, 0]]
            vb_ids = fverts[np.arange(len(facea)), edge_pairs[edgea][:, 1]]
            np.add.at(d_ndc, va_ids, ga)
            np.add.at(d_ndc, vb_ids, gb)
        d_verts = d_ndc[:, 0:1] * jx + d_ndc[:, 1:2] * jy
        return as_f32(d_verts)

    return mask.astype(F32), backward


def render_shaded(
    vertices: np.ndarray,
    faces: np.ndarray,
    camera: Camera,
    light_dir=(0.3, 0.4, 0.85),
    settings: RasterSettings | None = None,
    background: BackgroundSpec | None = None,
) -> np.ndarray:
    """Textureless Lambertian render: flat grey max(0, n.l) per face,
    replicated to 3 channels.  Held fixed as guidance; no gradients."""
    settings = settings or RasterSettings(mode="hard")
    res = settings.resolution or camera.resolution
    ndc, w = camera.project(vertices)
    faces = np.asarray(faces)
    face_idx, _, _, _ = _hard_rasterize(ndc, w, faces, res, camera.near)
    v = np.asarray(vertices, dtype=np.float64)
    tri = v[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norms = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.where(norms < 1e-30, 1.0, norms)
    light = np.asarray(light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    intensity = np.maximum(n @ light, 0.0)
    if background is not None:
        image = background.image(res, res).astype(F32)
        if image.shape[0] != 3:
            raise ShapeError("shaded background must be 3-channel")
    else:
        image = np.zeros((3, res, res), F32)
    covered = face_idx >= 0
    vals = intensity[face_idx[covered]]
    for ch in range(3):
        image[ch][covered] = vals
    return image


def composite_background(image: np.ndarray, hard_mask: np.ndarray, bg: BackgroundSpec) -> np.ndarray:
    """Replace uncovered pixels with the background pattern."""
    image = as_f32(image)
    h, w = image.shape[1], image.shape[2]
    bg_img = bg.image(h, w)
    if bg_img.shape[0] != image.shape[0]:
        raise ShapeError(f"background channels {bg_img.shape[0]} != image {image.shape[0]}")
    keep = np.asarray(hard_mask) > 0.5
    return np.where(keep[None], image, bg_img)


@dataclass
class HiLoAux:
    hi_output: RenderOutput
    lo_resolution: int
    vertices: np.ndarray  # posed world vertices used by the render

    def texture_backward(self, d_lo: np.ndarray) -> np.ndarray:
        hi = self.hi_output.feature_image
        d_hi = bilinear_resize_backward(hi.shape, d_lo)
        return self.hi_output.texture_backward(d_hi)


def render_hi_lo(
    model: HeadModel,
    state: AvatarState,
    pose: ArticulationPose,
    camera: Camera,
    lo_resolution: int,
    background: BackgroundSpec | None = None,
    enlarge_offsets: np.ndarray | None = None,
):
    """Render features at the camera resolution, then bilinearly downsample.

    The high-resolution pass avoids texture aliasing; the backward path
    composes the resize transpose with the texture sampling adjoint.
    Returns (feature image [4,lo,lo], HiLoAux).
    """
    posed = posed_vertices(model, state, pose, enlarge_offsets=enlarge_offsets)
    out = render_features(
        posed.vertices, model.effective_faces(), model.uv, state.texture, camera,
        RasterSettings(mode="hard"), background,
    )
    lo = bilinear_resize(out.feature_image, lo_resolution, lo_resolution)
    return lo, HiLoAux(out, lo_resolution, posed.vertices)
