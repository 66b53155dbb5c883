"""Parametric articulated head: template + blendshapes + skinning.

A rest-pose mesh is deformed by linear blendshapes (shape, expression, pose
correctives), displaced by a per-vertex offset MLP, then posed with linear
blend skinning over a small joint hierarchy.  The module also carries the
mesh-graph Laplacian machinery used by geometry regularizers and the
synthetic desk-scale model that stands in for licensed 3DMM assets.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .diffcore import F32, MlpParams, as_f32, init_mlp, mlp_backward, mlp_forward_cached
from .errors import ModelFormatError, NumericsError, ShapeError

REGION_OTHER = 0
REGION_SCALP = 1
REGION_FACE = 2
REGION_FOREHEAD = 3
REGION_NAMES = {REGION_OTHER: "other", REGION_SCALP: "scalp", REGION_FACE: "face", REGION_FOREHEAD: "forehead"}

FEATURE_DIM = 32


@dataclass
class Adjacency:
    """CSR-style vertex adjacency over the edge graph."""

    neighbors: np.ndarray  # flat int32
    offsets: np.ndarray  # [V+1] int64
    degrees: np.ndarray  # [V] float32 (>=1 enforced at build)
    edges: np.ndarray  # [E,2] unique undirected edges


@dataclass
class HeadModel:
    """Template mesh plus deformation bases; immutable after load."""

    template: np.ndarray  # [V,3] f32
    faces: np.ndarray  # [F,3] i32
    shape_basis: np.ndarray  # [V,3,n_beta]
    expression_basis: np.ndarray  # [V,3,n_psi]
    pose_basis: np.ndarray  # [V,3,(J-1)*9]
    joint_positions: np.ndarray  # [J,3]
    joint_parents: np.ndarray  # [J] i32, parent[0] == -1
    skinning_weights: np.ndarray  # [V,J] row-stochastic
    uv: np.ndarray  # [V,2] in [0,1]^2
    region_labels: np.ndarray  # [V] u8
    face_delete_mask: np.ndarray | None = None  # [F] bool
    extra_faces: np.ndarray | None = None  # [K,3] i32
    _adjacency: Adjacency | None = field(default=None, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_positions.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[2]

    def effective_faces(self) -> np.ndarray:
        """Faces after applying the optional deletion mask and extra-face list."""
        faces = self.faces
        if self.face_delete_mask is not None and self.face_delete_mask.any():
            faces = faces[~self.face_delete_mask]
        if self.extra_faces is not None and len(self.extra_faces):
            faces = np.concatenate([faces, self.extra_faces.astype(np.int32)], axis=0)
        return faces

    def adjacency(self) -> Adjacency:
        if self._adjacency is None:
            object.__setattr__(self, "_adjacency", build_adjacency(self.effective_faces(), self.n_vertices))
        return self._adjacency

    def validate(self) -> None:
        v = self.n_vertices
        if self.faces.min(initial=0) < 0 or self.faces.max(initial=-1) >= v:
            raise ModelFormatError("faces index out-of-range vertices")
        rows = self.skinning_weights.sum(axis=1)
        if np.any(self.skinning_weights < -1e-7):
            raise ModelFormatError("negative skinning weights")
        if np.max(np.abs(rows - 1.0)) > 1e-5:
            raise ModelFormatError("skinning weight rows must sum to 1 within 1e-5")
        if self.uv.min() < -1e-6 or self.uv.max() > 1 + 1e-6:
            raise ModelFormatError("uv coordinates outside [0,1]^2")
        if self.joint_parents[0] != -1:
            raise ModelFormatError("joint 0 must be the root (parent -1)")
        if np.any(self.joint_parents[1:] >= np.arange(1, self.n_joints)):
            raise ModelFormatError("joint parents must precede children")
        expected_pose = 9 * (self.n_joints - 1)
        if self.pose_basis.shape[2] != expected_pose:
            raise ModelFormatError(f"pose basis must have {expected_pose} columns, got {self.pose_basis.shape[2]}")
        counts = edge_face_counts(self.effective_faces())
        if counts.max(initial=0) > 2:
            raise ModelFormatError("mesh is not edge-manifold (edge shared by >2 faces)")


@dataclass
class AvatarState:
    """All optimization variables of one avatar."""

    beta: np.ndarray  # [n_beta]
    mlp: MlpParams
    features: np.ndarray  # [V, d]
    texture: np.ndarray  # [4, R, R]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def copy(self) -> "AvatarState":
        return AvatarState(self.beta.copy(), self.mlp.copy(), self.features.copy(), self.texture.copy())

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {"beta": self.beta, "features": self.features, "texture": self.texture}
        for k, a in self.mlp.named_arrays().items():
            out[f"mlp_{k}"] = a
        return out


@dataclass
class ArticulationPose:
    """Expression + joint rotations + viewing camera for one render."""

    psi: np.ndarray  # [n_psi]
    phi: np.ndarray  # [J,3] axis-angle per joint
    azimuth: float = 0.0  # degrees
    elevation: float = 0.0  # degrees
    radius: float = 0.7  # meters

    def __post_init__(self):
        self.psi = as_f32(self.psi)
        self.phi = as_f32(self.phi)
        if self.radius <= 0:
            raise ShapeError("camera radius must be positive")

    @classmethod
    def canonical(cls, model: HeadModel, azimuth: float = 0.0, radius: float = 0.7) -> "ArticulationPose":
        return cls(
            psi=np.zeros(model.n_expression, F32),
            phi=np.zeros((model.n_joints, 3), F32),
            azimuth=azimuth,
            elevation=0.0,
            radius=radius,
        )


# ---------------------------------------------------------------------------
# Mesh graph
# ---------------------------------------------------------------------------


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges [E,2] with e[0] < e[1], lexicographically sorted."""
    f = np.asarray(faces, dtype=np.int64)
    pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    pairs.sort(axis=1)
    return np.unique(pairs, axis=0)


def edge_face_counts(faces: np.ndarray) -> np.ndarray:
    """How many faces share each unique edge (manifold check input)."""
    f = np.asarray(faces, dtype=np.int64)
    pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    pairs.sort(axis=1)
    _, counts = np.unique(pairs, axis=0, return_counts=True)
    return counts


def build_adjacency(faces: np.ndarray, n_vertices: int) -> Adjacency:
    edges = mesh_edges(faces)
    both = np.concatenate([edges, edges[:, ::-1]], axis=0)
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    counts = np.bincount(both[:, 0], minlength=n_vertices)
    offsets = np.zeros(n_vertices + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    degrees = np.maximum(counts, 1).astype(F32)
    return Adjacency(both[:, 1].astype(np.int32), offsets, degrees, edges.astype(np.int32))


def uniform_laplacian(adj: Adjacency, vertices: np.ndarray) -> np.ndarray:
    """L(v)_i = mean of neighbours minus v_i over the edge graph."""
    v = as_f32(vertices)
    src = adj.edges[:, 0]
    dst = adj.edges[:, 1]
    sums = np.zeros_like(v)
    np.add.at(sums, src, v[dst])
    np.add.at(sums, dst, v[src])
    return sums / adj.degrees[:, None] - v


def uniform_laplacian_transpose(adj: Adjacency, d_lap: np.ndarray) -> np.ndarray:
    """Adjoint of uniform_laplacian: dv = L^T d."""
    d = as_f32(d_lap)
    scaled = d / adj.degrees[:, None]
    src = adj.edges[:, 0]
    dst = adj.edges[:, 1]
    out = np.zeros_like(d)
    np.add.at(out, dst, scaled[src])
    np.add.at(out, src, scaled[dst])
    return out - d


# ---------------------------------------------------------------------------
# Subdivision and template enlargement
# ---------------------------------------------------------------------------


def subdivide4(model: HeadModel) -> HeadModel:
    """Four-way subdivision: each face splits into 4, new vertices at edge
    midpoints, all per-vertex attributes midpoint-interpolated."""
    counts = edge_face_counts(model.faces)
    if counts.max(initial=0) > 2:
        raise ModelFormatError("subdivide4 requires an edge-manifold mesh")
    edges = mesh_edges(model.faces)
    v = model.n_vertices
    edge_index = {(int(a), int(b)): v + i for i, (a, b) in enumerate(edges)}

    def mid(a, b):
        key = (a, b) if a < b else (b, a)
        return edge_index[key]

    new_faces = []
    for f in model.faces:
        a, b, c = int(f[0]), int(f[1]), int(f[2])
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        new_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    faces = np.asarray(new_faces, dtype=np.int32)

    def interp(attr):
        attr = np.asarray(attr)
        midvals = 0.5 * (attr[edges[:, 0]] + attr[edges[:, 1]])
        return np.concatenate([attr, midvals.astype(attr.dtype)], axis=0)

    skin = interp(model.skinning_weights)
    skin = skin / skin.sum(axis=1, keepdims=True)
    # midpoint label: inherit from the lower-index endpoint when they differ
    lab = model.region_labels
    mid_lab = np.where(lab[edges[:, 0]] == lab[edges[:, 1]], lab[edges[:, 0]], lab[np.minimum(edges[:, 0], edges[:, 1])])
    labels = np.concatenate([lab, mid_lab]).astype(np.uint8)

    return HeadModel(
        template=as_f32(interp(model.template)),
        faces=faces,
        shape_basis=as_f32(interp(model.shape_basis)),
        expression_basis=as_f32(interp(model.expression_basis)),
        pose_basis=as_f32(interp(model.pose_basis)),
        joint_positions=model.joint_positions.copy(),
        joint_parents=model.joint_parents.copy(),
        skinning_weights=as_f32(skin),
        uv=as_f32(np.clip(interp(model.uv), 0.0, 1.0)),
        region_labels=labels,
    )


def enlarge_template(model: HeadModel, strength: float, iterations: int) -> np.ndarray:
    """Offsets produced by iterated uniform-Laplacian smoothing v <- v + strength*L(v).

    Positive strength diffuses toward neighbours (shrinks a convex mesh);
    negative strength runs the flow backwards and inflates the mesh roughly
    along vertex normals.  Raises on divergence (any displacement beyond 10x
    the bounding-box diagonal).
    """
    adj = model.adjacency()
    v0 = model.template.copy()
    diag = float(np.linalg.norm(v0.max(axis=0) - v0.min(axis=0)))
    v = v0.copy()
    for _ in range(iterations):
        v = v + F32(strength) * uniform_laplacian(adj, v)
        disp = np.linalg.norm(v - v0, axis=1)
        if not np.all(np.isfinite(v)) or disp.max(initial=0.0) > 10.0 * diag:
            raise NumericsError(f"template enlargement diverged (strength={strength}, iterations={iterations})")
    return v - v0


# ---------------------------------------------------------------------------
# Articulation: blendshapes + linear blend skinning
# ---------------------------------------------------------------------------


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle [N,3] -> rotation matrices [N,3,3] via the exponential map."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=1)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = aa / safe[:, None]
    K = np.zeros((len(aa), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
    K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
    K[:, 2, 0], K[:, 2, 1] = k[:, 0], -k[:, 1]
    s = np.sin(theta)[:, None, None]
    c = (1.0 - np.cos(theta))[:, None, None]
    R = np.eye(3)[None] + s * K + c * (K @ K)
    R[small] = np.eye(3)
    return R


def pose_feature(phi: np.ndarray) -> np.ndarray:
    """Corrective-blendshape features: flattened (R_j - I) of non-root joints."""
    R = rodrigues(np.asarray(phi).reshape(-1, 3)[1:])
    return as_f32((R - np.eye(3)[None]).reshape(-1))


def blendshape(model: HeadModel, beta, psi, phi) -> np.ndarray:
    """Rest-pose vertices T + S.beta + E.psi + P.posefeat(phi)."""
    beta = as_f32(beta)
    psi = as_f32(psi)
    if beta.shape != (model.n_shape,) or psi.shape != (model.n_expression,):
        raise ShapeError(f"beta {beta.shape} / psi {psi.shape} do not match model bases")
    out = model.template.copy()
    out += model.shape_basis @ beta
    out += model.expression_basis @ psi
    out += model.pose_basis @ pose_feature(phi)
    return out


def _joint_world_transforms(model: HeadModel, phi: np.ndarray) -> np.ndarray:
    """Forward kinematics; returns [J,4,4] skinning transforms relative to rest."""
    J = model.n_joints
    phi = np.asarray(phi, dtype=np.float64).reshape(J, 3)
    R = rodrigues(phi)
    joints = model.joint_positions.astype(np.float64)
    world = np.zeros((J, 4, 4))
    for j in range(J):
        local = np.eye(4)
        local[:3, :3] = R[j]
        parent = int(model.joint_parents[j])
        if parent < 0:
            local[:3, 3] = joints[j]
            world[j] = local
        else:
            local[:3, 3] = joints[j] - joints[parent]
            world[j] = world[parent] @ local
    # remove the rest-pose joint translation so zero rotations give identity
    rel = world.copy()
    rel[:, :3, 3] -= np.einsum("jab,jb->ja", world[:, :3, :3], joints)
    return rel


def lbs(model: HeadModel, vertices_rest: np.ndarray, phi) -> np.ndarray:
    """Pose rest vertices with linear blend skinning."""
    posed, _ = lbs_with_rotations(model, vertices_rest, phi)
    return posed


def lbs_with_rotations(model: HeadModel, vertices_rest: np.ndarray, phi):
    """LBS plus the per-vertex blended linear map (for the backward pass).

    posed_v = A_v @ rest_v + t_v where A_v = sum_j w_vj R'_j; the returned
    rotations array holds A_v, the exact Jacobian d posed_v / d rest_v.
    """
    rest = as_f32(vertices_rest)
    if rest.shape != (model.n_vertices, 3):
        raise ShapeError(f"rest vertices {rest.shape}, expected [{model.n_vertices},3]")
    rel = _joint_world_transforms(model, phi)
    w = model.skinning_weights.astype(np.float64)
    A = np.einsum("vj,jab->vab", w, rel[:, :3, :3])
    t = w @ rel[:, :3, 3]
    posed = np.einsum("vab,vb->va", A, rest.astype(np.float64)) + t
    return as_f32(posed), as_f32(A)


@dataclass
class PosedResult:
    """Posed vertices plus the adjoint hook back to (mlp, beta, features)."""

    vertices: np.ndarray  # [V,3] posed
    rest: np.ndarray  # [V,3] before LBS
    offsets: np.ndarray  # [V,3] MLP output
    _model: HeadModel
    _state: AvatarState
    _mlp_input: np.ndarray
    _mlp_cache: tuple
    _vertex_rotations: np.ndarray  # [V,3,3]

    def backward(self, d_vertices: np.ndarray | None, d_offsets: np.ndarray | None = None):
        """Adjoints for (mlp params, beta, features).

        `d_vertices` is the adjoint of the posed vertices; `d_offsets` is an
        optional extra adjoint applied directly to the MLP offsets (used by
        the offset regularizer, which reads them before posing).
        """
        v = self._model.n_vertices
        if d_vertices is None:
            d_rest = np.zeros((v, 3), F32)
        else:
            d_vertices = as_f32(d_vertices)
            d_rest = np.einsum("vab,va->vb", self._vertex_rotations, d_vertices)
        d_beta = np.einsum("vck,vc->k", self._model.shape_basis, d_rest).astype(F32)
        d_off_total = d_rest if d_offsets is None else d_rest + as_f32(d_offsets)
        mlp_grads, d_input = mlp_backward(self._state.mlp, self._mlp_input, d_off_total, self._mlp_cache)
        d_features = d_input[:, 3:].copy()
        return mlp_grads, d_beta, d_features


def posed_vertices(
    model: HeadModel,
    state: AvatarState,
    pose: ArticulationPose,
    enlarge_offsets: np.ndarray | None = None,
) -> PosedResult:
    """Full deformation: blendshapes + template enlargement + MLP offsets, then LBS.

    The MLP consumes the un-enlarged template concatenated with the vertex
    features; its offsets are added in rest pose, before skinning.
    """
    mlp_input = np.concatenate([model.template, state.features], axis=1)
    offsets, cache = mlp_forward_cached(state.mlp, mlp_input)
    rest = blendshape(model, state.beta, pose.psi, pose.phi)
    if enlarge_offsets is not None:
        rest = rest + as_f32(enlarge_offsets)
    rest = rest + offsets
    posed, rotations = lbs_with_rotations(model, rest, pose.phi)
    return PosedResult(posed, rest, offsets, model, state, mlp_input, cache, rotations)


# ---------------------------------------------------------------------------
# Self-intersection test
# ---------------------------------------------------------------------------


def _segments_cross_triangles(seg_a, seg_b, tri0, tri1, tri2, eps=1e-12):
    """Batched segment-vs-triangle intersection (Moller-Trumbore, t in [0,1])."""
    d = seg_b - seg_a
    e1 = tri1 - tri0
    e2 = tri2 - tri0
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > eps
    inv = np.where(ok, det, 1.0)
    s = seg_a - tri0
    u = np.einsum("ij,ij->i", s, p) / inv
    q = np.cross(s, e1)
    v = np.einsum("ij,ij->i", d, q) / inv
    t = np.einsum("ij,ij->i", e2, q) / inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t >= 0.0) & (t <= 1.0)
    return hit


def count_self_intersections(vertices: np.ndarray, faces: np.ndarray) -> int:
    """Number of face pairs whose triangles cross (shared-vertex pairs skipped).

    Pairs are pruned by bounding boxes, then each pair is tested by checking
    the 3+3 edges of one triangle against the other.  Coplanar overlap
    without edge crossing is not detected; adequate for desk-scale meshes in
    generic position.
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    tri = v[f]  # [F,3,3]
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    n = len(f)
    ii, jj = np.triu_indices(n, k=1)
    overlap = np.all(lo[ii] <= hi[jj], axis=1) & np.all(lo[jj] <= hi[ii], axis=1)
    ii, jj = ii[overlap], jj[overlap]
    shares = (
        (f[ii][:, :, None] == f[jj][:, None, :]).any(axis=(1, 2))
    )
    ii, jj = ii[~shares], jj[~shares]
    if len(ii) == 0:
        return 0
    crossing = np.zeros(len(ii), dtype=bool)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        crossing |= _segments_cross_triangles(tri[ii][:, a], tri[ii][:, b], tri[jj][:, 0], tri[jj][:, 1], tri[jj][:, 2])
        crossing |= _segments_cross_triangles(tri[jj][:, a], tri[jj][:, b], tri[ii][:, 0], tri[ii][:, 1], tri[ii][:, 2])
    return int(crossing.sum())


# ---------------------------------------------------------------------------
# Synthetic desk model
# ---------------------------------------------------------------------------


@dataclass
class DeskModelSpec:
    """Parameters of the generated synthetic head."""

    subdivisions: int = 2
    radius: float = 0.1
    y_stretch: float = 1.1
    n_shape: int = 4
    n_expression: int = 4
    pose_basis_amplitude: float = 0.005


def _icosahedron():
    g = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, g, 0), (1, g, 0), (-1, -g, 0), (1, -g, 0),
            (0, -1, g), (0, 1, g), (0, -1, -g), (0, 1, -g),
            (g, 0, -1), (g, 0, 1), (-g, 0, -1), (-g, 0, 1),
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=np.int32,
    )
    return verts, faces


def make_desk_model(spec: DeskModelSpec | None = None) -> HeadModel:
    """Deterministic synthetic head with the full model schema.

    Icosphere base (subdivided, re-projected to the sphere, stretched along
    y), two joints (neck root + jaw), four smooth shape and expression basis
    fields, latitude-band region labels and a spherical UV atlas.
    """
    spec = spec or DeskModelSpec()
    verts, faces = _icosahedron()

    n_joints = 2
    placeholder = lambda v: np.zeros((len(v), 3, 0), F32)  # noqa: E731
    base = HeadModel(
        template=as_f32(verts),
        faces=faces,
        shape_basis=placeholder(verts),
        expression_basis=placeholder(verts),
        pose_basis=np.zeros((len(verts), 3, 9 * (n_joints - 1)), F32),
        joint_positions=np.zeros((n_joints, 3), F32),
        joint_parents=np.array([-1, 0], np.int32),
        skinning_weights=np.concatenate([np.ones((len(verts), 1), F32), np.zeros((len(verts), 1), F32)], axis=1),
        uv=np.zeros((len(verts), 2), F32),
        region_labels=np.zeros(len(verts), np.uint8),
    )
    for _ in range(spec.subdivisions):
        base = subdivide4(base)
        t = base.template.astype(np.float64)
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        base.template[:] = as_f32(t)

    unit = base.template.astype(np.float64)
    verts = unit * spec.radius
    verts[:, 1] *= spec.y_stretch
    x, y, z = unit[:, 0], unit[:, 1], unit[:, 2]
    lat = np.arcsin(np.clip(y, -1, 1))
    lon = np.arctan2(x, z)

    v_count = len(verts)
    normals = unit  # sphere: normal == direction

    def bump(center_lat, center_lon, width):
        d = (lat - center_lat) ** 2 + (np.arctan2(np.sin(lon - center_lon), np.cos(lon - center_lon))) ** 2 / 2.0
        return np.exp(-d / (2 * width**2))

    # smooth low-frequency shape fields: axis scalings + brow bulge
    shape_fields = [
        normals * np.abs(x)[:, None] * 0.5,
        normals * np.abs(y)[:, None] * 0.5,
        normals * np.abs(z)[:, None] * 0.5,
        normals * bump(0.35, 0.0, 0.5)[:, None] * 0.4,
    ][: spec.n_shape]
    shape_basis = np.stack([as_f32(f * spec.radius) for f in shape_fields], axis=2)

    # expression fields: jaw drop, smile, brow raise, cheek puff
    expr_fields = [
        np.stack([np.zeros_like(x), -bump(-0.5, 0.0, 0.45), np.zeros_like(x)], axis=1) * 0.5,
        normals * (bump(-0.25, 0.7, 0.3) + bump(-0.25, -0.7, 0.3))[:, None] * 0.4,
        np.stack([np.zeros_like(x), bump(0.4, 0.0, 0.4), np.zeros_like(x)], axis=1) * 0.3,
        normals * (bump(-0.1, 1.0, 0.35) + bump(-0.1, -1.0, 0.35))[:, None] * 0.35,
    ][: spec.n_expression]
    expression_basis = np.stack([as_f32(f * spec.radius) for f in expr_fields], axis=2)

    # small smooth pose-corrective fields for the jaw joint
    pose_cols = []
    for k in range(9):
        phase = 2 * np.pi * k / 9.0
        fld = normals * (np.sin(lat * (1 + k % 3) + phase) * np.cos(lon + phase))[:, None]
        pose_cols.append(as_f32(fld * spec.pose_basis_amplitude))
    pose_basis = np.stack(pose_cols, axis=2)

    joints = np.array([[0.0, -0.6 * spec.radius, 0.0], [0.0, -0.25 * spec.radius, 0.55 * spec.radius]], np.float64)

    # jaw weight: smooth blob on the lower-front region
    jaw_w = np.clip(bump(-0.45, 0.0, 0.5), 0.0, 1.0) * 0.9
    skin = np.stack([1.0 - jaw_w, jaw_w], axis=1)
    skin /= skin.sum(axis=1, keepdims=True)

    labels = np.full(v_count, REGION_OTHER, np.uint8)
    labels[lat > 0.7] = REGION_SCALP
    labels[(lat > 0.25) & (lat <= 0.7) & (z > 0)] = REGION_FOREHEAD
    labels[(lat <= 0.25) & (lat > -0.6) & (z > 0)] = REGION_FACE

    uv = np.stack([lon / (2 * np.pi) + 0.5, lat / np.pi + 0.5], axis=1)

    model = HeadModel(
        template=as_f32(verts),
        faces=base.faces,
        shape_basis=shape_basis,
        expression_basis=expression_basis,
        pose_basis=pose_basis,
        joint_positions=as_f32(joints),
        joint_parents=np.array([-1, 0], np.int32),
        skinning_weights=as_f32(skin),
        uv=as_f32(np.clip(uv, 0.0, 1.0)),
        region_labels=labels,
    )
    model.validate()
    return model


def init_avatar_state(
    model: HeadModel,
    rng: np.random.Generator,
    feature_dim: int = FEATURE_DIM,
    texture_resolution: int = 512,
    feature_sigma: float = 0.02,
) -> AvatarState:
    """Fresh optimization variables: zero shape, N(0, sigma^2) features,
    He-uniform MLP with a zeroed final layer, zero texture."""
    features = rng.normal(0.0, feature_sigma, size=(model.n_vertices, feature_dim)).astype(F32)
    mlp = init_mlp(3 + feature_dim, rng, zero_final=True)
    return AvatarState(
        beta=np.zeros(model.n_shape, F32),
        mlp=mlp,
        features=features,
        texture=np.zeros((4, texture_resolution, texture_resolution), F32),
    )


# ---------------------------------------------------------------------------
# Model file I/O (magic HDM1)
# ---------------------------------------------------------------------------

_MODEL_FIELDS = (
    "template", "faces", "shape_basis", "expression_basis", "pose_basis",
    "joint_positions", "joint_parents", "skinning_weights", "uv", "region_labels",
)


def save_head_model(path, model: HeadModel) -> None:
    arrays = {name: getattr(model, name) for name in _MODEL_FIELDS}
    if model.face_delete_mask is not None:
        arrays["face_delete_mask"] = model.face_delete_mask
    if model.extra_faces is not None:
        arrays["extra_faces"] = model.extra_faces
    fileio.write_chunked(path, fileio.MAGIC_MODEL, arrays)


def load_head_model(path) -> HeadModel:
    arrays = fileio.read_chunked(path, fileio.MAGIC_MODEL)
    missing = [n for n in _MODEL_FIELDS if n not in arrays]
    if missing:
        raise ModelFormatError(f"model file missing fields: {missing}")
    model = HeadModel(
        template=as_f32(arrays["template"]),
        faces=arrays["faces"].astype(np.int32),
        shape_basis=as_f32(arrays["shape_basis"]),
        expression_basis=as_f32(arrays["expression_basis"]),
        pose_basis=as_f32(arrays["pose_basis"]),
        joint_positions=as_f32(arrays["joint_positions"]),
        joint_parents=arrays["joint_parents"].astype(np.int32),
        skinning_weights=as_f32(arrays["skinning_weights"]),
        uv=as_f32(arrays["uv"]),
        region_labels=arrays["region_labels"].astype(np.uint8),
        face_delete_mask=arrays.get("face_delete_mask"),
        extra_faces=arrays.get("extra_faces"),
    )
    model.validate()
    return model
