import numpy as np
import pytest

from headopt.diffcore import MlpParams, gradcheck, init_mlp
from headopt.errors import ModelFormatError, NumericsError
from headopt.headmodel import (
    ArticulationPose,
    AvatarState,
    DeskModelSpec,
    HeadModel,
    blendshape,
    build_adjacency,
    count_self_intersections,
    enlarge_template,
    init_avatar_state,
    lbs,
    load_head_model,
    make_desk_model,
    mesh_edges,
    posed_vertices,
    rodrigues,
    save_head_model,
    subdivide4,
    uniform_laplacian,
    uniform_laplacian_transpose,
)

from test_diffcore import nudge_relu_preacts


def single_triangle_model():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], np.float32)
    faces = np.array([[0, 1, 2]], np.int32)
    return HeadModel(
        template=verts,
        faces=faces,
        shape_basis=np.zeros((3, 3, 1), np.float32),
        expression_basis=np.zeros((3, 3, 1), np.float32),
        pose_basis=np.zeros((3, 3, 9), np.float32),
        joint_positions=np.zeros((2, 3), np.float32),
        joint_parents=np.array([-1, 0], np.int32),
        skinning_weights=np.tile(np.array([[0.5, 0.5]], np.float32), (3, 1)),
        uv=np.array([[0, 0], [1, 0], [0, 1]], np.float32),
        region_labels=np.zeros(3, np.uint8),
    )


class TestSubdivide4:
    def test_single_triangle(self):
        out = subdivide4(single_triangle_model())
        assert out.n_vertices == 6
        assert out.n_faces == 4
        # midpoints present
        mids = {(0.5, 0.0, 0.0), (0.0, 0.5, 0.0), (0.5, 0.5, 0.0)}
        got = {tuple(np.round(v, 6)) for v in out.template[3:]}
        assert got == mids

    def test_closed_mesh_combinatorics(self, small_model):
        v, e, f = small_model.n_vertices, len(mesh_edges(small_model.faces)), small_model.n_faces
        out = subdivide4(small_model)
        v2, e2, f2 = out.n_vertices, len(mesh_edges(out.faces)), out.n_faces
        assert f2 == 4 * f
        assert e2 == 2 * e + 3 * f
        assert v2 == v + e
        assert v - e + f == v2 - e2 + f2  # Euler characteristic preserved

    def test_skinning_rows_remain_stochastic(self, small_model):
        out = subdivide4(small_model)
        rows = out.skinning_weights.sum(axis=1)
        assert np.max(np.abs(rows - 1.0)) < 1e-5
        assert out.skinning_weights.min() >= 0

    def test_attributes_midpoint_interpolated(self, small_model):
        out = subdivide4(small_model)
        edges = mesh_edges(small_model.faces)
        v = small_model.n_vertices
        mid_uv = 0.5 * (small_model.uv[edges[:, 0]] + small_model.uv[edges[:, 1]])
        np.testing.assert_allclose(out.uv[v:], np.clip(mid_uv, 0, 1), atol=1e-6)
        mid_basis = 0.5 * (small_model.shape_basis[edges[:, 0]] + small_model.shape_basis[edges[:, 1]])
        np.testing.assert_allclose(out.shape_basis[v:], mid_basis, atol=1e-6)

    def test_rejects_non_manifold(self):
        m = single_triangle_model()
        m.faces = np.array([[0, 1, 2], [0, 1, 2], [1, 0, 2]], np.int32)
        with pytest.raises(ModelFormatError):
            subdivide4(m)


class TestEnlargeTemplate:
    def test_zero_strength_zero_offsets(self, small_model):
        off = enlarge_template(small_model, 0.0, 3)
        assert np.all(off == 0)

    def test_icosphere_moves_outward(self, small_model):
        off = enlarge_template(small_model, -0.5, 1)
        # on the stretched sphere the outward direction is close to the
        # unit-sphere normal; positive dot for every vertex
        normals = small_model.template / np.linalg.norm(small_model.template, axis=1, keepdims=True)
        dots = np.einsum("ij,ij->i", off, normals)
        assert np.all(dots > 0)

    def test_divergence_detected(self, small_model):
        with pytest.raises(NumericsError):
            enlarge_template(small_model, -80.0, 60)

    def test_desk_enlargement_intersection_free(self, desk_model):
        off = enlarge_template(desk_model, -0.8, 3)
        assert count_self_intersections(desk_model.template + off, desk_model.faces) == 0


class TestBlendshape:
    def test_zeros_give_template(self, desk_model):
        out = blendshape(desk_model, np.zeros(desk_model.n_shape),
                         np.zeros(desk_model.n_expression), np.zeros((2, 3)))
        assert np.array_equal(out, desk_model.template)

    def test_unit_vector_adds_basis_column(self, desk_model):
        beta = np.zeros(desk_model.n_shape, np.float32)
        beta[2] = 1.0
        out = blendshape(desk_model, beta, np.zeros(desk_model.n_expression), np.zeros((2, 3)))
        np.testing.assert_allclose(out, desk_model.template + desk_model.shape_basis[:, :, 2], atol=1e-6)

    def test_superposition(self, desk_model, rng):
        beta = rng.normal(size=desk_model.n_shape).astype(np.float32)
        psi = rng.normal(size=desk_model.n_expression).astype(np.float32)
        zero_b = np.zeros_like(beta)
        zero_p = np.zeros_like(psi)
        phi0 = np.zeros((2, 3))
        both = blendshape(desk_model, beta, psi, phi0)
        only_b = blendshape(desk_model, beta, zero_p, phi0)
        only_p = blendshape(desk_model, zero_b, psi, phi0)
        np.testing.assert_allclose(both, only_b + only_p - desk_model.template, atol=1e-6)


def fk_oracle(model, rest, phi):
    """Independent per-vertex forward kinematics: chain rotate-about-pivot
    transforms down the hierarchy, blend with skinning weights."""

    def rot_about(p, R):
        m = np.eye(4)
        m[:3, :3] = R
        m[:3, 3] = p - R @ p
        return m

    R = rodrigues(np.asarray(phi, np.float64))
    chains = []
    for j in range(model.n_joints):
        chain = []
        k = j
        while k >= 0:
            chain.append(k)
            k = int(model.joint_parents[k])
        m = np.eye(4)
        for k in reversed(chain):
            m = m @ rot_about(model.joint_positions[k].astype(np.float64), R[k])
        chains.append(m)
    out = np.zeros_like(rest, dtype=np.float64)
    for vi in range(len(rest)):
        p = np.append(rest[vi].astype(np.float64), 1.0)
        acc = np.zeros(4)
        for j in range(model.n_joints):
            acc += model.skinning_weights[vi, j] * (chains[j] @ p)
        out[vi] = acc[:3]
    return out


class TestLbs:
    def test_zero_rotations_identity(self, desk_model):
        rest = desk_model.template + 0.01
        posed = lbs(desk_model, rest, np.zeros((2, 3)))
        np.testing.assert_allclose(posed, rest, atol=1e-6)

    def test_single_joint_rigid_rotation(self):
        m = single_triangle_model()
        m.skinning_weights = np.tile(np.array([[1.0, 0.0]], np.float32), (3, 1))
        m.joint_positions = np.array([[0.2, 0.1, 0.0], [1, 1, 1]], np.float32)
        phi = np.zeros((2, 3))
        phi[0] = [0, 0, np.pi / 4]
        posed = lbs(m, m.template, phi)
        R = rodrigues(phi)[0]
        pivot = m.joint_positions[0].astype(np.float64)
        want = (m.template.astype(np.float64) - pivot) @ R.T + pivot
        np.testing.assert_allclose(posed, want, atol=1e-6)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_two_joint_chain_matches_oracle(self, small_model, seed):
        rng = np.random.default_rng(seed)
        rest = small_model.template + rng.normal(0, 0.01, small_model.template.shape).astype(np.float32)
        phi = rng.normal(0, 0.4, (2, 3))
        posed = lbs(small_model, rest, phi)
        want = fk_oracle(small_model, rest, phi)
        np.testing.assert_allclose(posed, want, atol=1e-5)

    def test_root_rotation_equivariance(self, small_model, rng):
        rest = small_model.template.copy()
        phi = np.zeros((2, 3))
        phi[0] = [0.3, -0.2, 0.5]
        posed = lbs(small_model, rest, phi)
        R = rodrigues(phi)[0]
        pivot = small_model.joint_positions[0].astype(np.float64)
        base = lbs(small_model, rest, np.zeros((2, 3)))
        want = (base.astype(np.float64) - pivot) @ R.T + pivot
        np.testing.assert_allclose(posed, want, atol=1e-5)


class TestUniformLaplacian:
    def test_centroid_vertex_is_zero_row(self):
        # vertex 0 at the centroid of its neighbours
        faces = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]], np.int32)
        ring = np.array([[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], np.float64)
        verts = np.vstack([[ring.mean(axis=0)], ring]).astype(np.float32)
        adj = build_adjacency(faces, 5)
        lap = uniform_laplacian(adj, verts)
        np.testing.assert_allclose(lap[0], 0.0, atol=1e-7)

    def test_regular_grid_interior_zero(self):
        # 3x3 grid, interior vertex 4
        idx = lambda r, c: 3 * r + c  # noqa: E731
        verts = np.array([[c, r, 0] for r in range(3) for c in range(3)], np.float32)
        faces = []
        for r in range(2):
            for c in range(2):
                faces.append([idx(r, c), idx(r, c + 1), idx(r + 1, c)])
                faces.append([idx(r, c + 1), idx(r + 1, c + 1), idx(r + 1, c)])
        adj = build_adjacency(np.array(faces, np.int32), 9)
        lap = uniform_laplacian(adj, verts)
        np.testing.assert_allclose(lap[4], 0.0, atol=1e-6)

    def test_matches_adjacency_list_oracle(self, small_model, rng):
        verts = rng.normal(size=(small_model.n_vertices, 3)).astype(np.float32)
        adj = build_adjacency(small_model.faces, small_model.n_vertices)
        lap = uniform_laplacian(adj, verts)
        # explicit neighbour-list reimplementation
        neigh = {i: set() for i in range(small_model.n_vertices)}
        for a, b, c in small_model.faces:
            neigh[a] |= {b, c}
            neigh[b] |= {a, c}
            neigh[c] |= {a, b}
        for i in range(small_model.n_vertices):
            ns = sorted(neigh[i])
            want = verts[ns].astype(np.float64).mean(axis=0) - verts[i]
            np.testing.assert_allclose(lap[i], want, atol=1e-6)

    def test_linearity(self, small_model, rng):
        adj = build_adjacency(small_model.faces, small_model.n_vertices)
        v = rng.normal(size=(small_model.n_vertices, 3)).astype(np.float32)
        w = rng.normal(size=(small_model.n_vertices, 3)).astype(np.float32)
        lhs = uniform_laplacian(adj, 2.0 * v + 3.0 * w)
        rhs = 2.0 * uniform_laplacian(adj, v) + 3.0 * uniform_laplacian(adj, w)
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_transpose_dot_product(self, small_model, rng):
        adj = build_adjacency(small_model.faces, small_model.n_vertices)
        v = rng.normal(size=(small_model.n_vertices, 3)).astype(np.float32)
        d = rng.normal(size=(small_model.n_vertices, 3)).astype(np.float32)
        lhs = float(np.sum(uniform_laplacian(adj, v).astype(np.float64) * d))
        rhs = float(np.sum(v.astype(np.float64) * uniform_laplacian_transpose(adj, d)))
        assert abs(lhs - rhs) < 1e-5 * max(1.0, abs(lhs))


def posed_vertices_f64(model, beta, mlp, features, psi, phi, enlarge=None):
    """Independent float64 re-implementation of the posing pipeline."""
    x = np.concatenate([model.template, features], axis=1).astype(np.float64)
    h = x
    for w, b in zip(mlp.weights[:-1], mlp.biases[:-1]):
        h = np.maximum(h @ w.astype(np.float64).T + b.astype(np.float64), 0.0)
    z = h @ mlp.weights[-1].astype(np.float64).T + mlp.biases[-1].astype(np.float64)
    offsets = mlp.output_scale * np.tanh(z)
    rest = model.template.astype(np.float64)
    rest = rest + model.shape_basis.astype(np.float64) @ np.asarray(beta, np.float64)
    rest = rest + model.expression_basis.astype(np.float64) @ np.asarray(psi, np.float64)
    R = rodrigues(np.asarray(phi, np.float64))
    feat = (R[1:] - np.eye(3)).reshape(-1)
    rest = rest + model.pose_basis.astype(np.float64) @ feat
    if enlarge is not None:
        rest = rest + enlarge.astype(np.float64)
    rest = rest + offsets
    return fk_oracle(model, rest, phi)


class TestPosedVertices:
    def make_state(self, model, rng, zero_final=False):
        state = init_avatar_state(model, rng, texture_resolution=16)
        if not zero_final:
            state.mlp = init_mlp(3 + state.feature_dim, rng, zero_final=False)
            for w in state.mlp.weights:
                w *= 0.3
        return state

    def test_identity_at_zero(self, desk_model, rng):
        state = self.make_state(desk_model, rng, zero_final=True)
        pose = ArticulationPose.canonical(desk_model)
        res = posed_vertices(desk_model, state, pose)
        assert np.array_equal(res.vertices, desk_model.template)
        assert np.all(res.offsets == 0)

    def test_enlarged_identity_bit_exact(self, desk_model, rng):
        state = self.make_state(desk_model, rng, zero_final=True)
        off = enlarge_template(desk_model, -0.5, 2)
        pose = ArticulationPose.canonical(desk_model)
        res = posed_vertices(desk_model, state, pose, enlarge_offsets=off)
        assert np.array_equal(res.vertices, desk_model.template + off)

    def test_offsets_bounded(self, small_model, rng):
        state = self.make_state(small_model, rng)
        for w in state.mlp.weights:
            w *= 40.0  # saturate tanh
        pose = ArticulationPose.canonical(small_model)
        res = posed_vertices(small_model, state, pose)
        assert np.max(np.abs(res.offsets)) <= 0.1

    def test_matches_f64_oracle(self, small_model, rng):
        state = self.make_state(small_model, rng)
        pose = ArticulationPose(
            psi=rng.normal(0, 0.5, small_model.n_expression),
            phi=rng.normal(0, 0.2, (2, 3)),
        )
        res = posed_vertices(small_model, state, pose)
        want = posed_vertices_f64(small_model, state.beta, state.mlp, state.features, pose.psi, pose.phi)
        np.testing.assert_allclose(res.vertices, want, atol=1e-4)

    @pytest.mark.parametrize("seed", [3, 4, 5])
    def test_gradcheck_beta_features_mlp(self, small_model, seed):
        rng = np.random.default_rng(seed)
        state = self.make_state(small_model, rng)
        state.beta = rng.normal(0, 0.3, small_model.n_shape).astype(np.float32)
        nudge_relu_preacts(state.mlp, np.concatenate([small_model.template, state.features], axis=1))
        pose = ArticulationPose(
            psi=rng.normal(0, 0.3, small_model.n_expression),
            phi=rng.normal(0, 0.2, (2, 3)),
        )
        proj = rng.normal(size=(small_model.n_vertices, 3)).astype(np.float32)

        def f(p):
            mlp = MlpParams([p[f"w{i}"] for i in range(4)], [p[f"b{i}"] for i in range(4)])
            loss = float(np.sum(posed_vertices_f64(small_model, p["beta"], mlp, p["features"], pose.psi, pose.phi) * proj))
            st = AvatarState(p["beta"], mlp, p["features"], np.zeros((4, 4, 4), np.float32))
            res = posed_vertices(small_model, st, pose)
            grads, d_beta, d_feat = res.backward(proj)
            out = {"beta": d_beta, "features": d_feat}
            for i in range(4):
                out[f"w{i}"] = grads.weights[i]
                out[f"b{i}"] = grads.biases[i]
            return loss, out

        params = {"beta": state.beta, "features": state.features, **state.mlp.named_arrays()}
        report = gradcheck(f, params, h=1e-3, tol=1e-3, max_entries_per_param=30,
                           rng=np.random.default_rng(0))
        assert report.passed, str(report)


class TestDeskModel:
    def test_invariants(self, desk_model):
        desk_model.validate()
        assert desk_model.n_shape >= 4
        assert desk_model.n_expression >= 4
        assert desk_model.n_joints >= 2
        labels = set(np.unique(desk_model.region_labels))
        assert {0, 1, 2, 3} <= labels

    def test_deterministic(self):
        a = make_desk_model(DeskModelSpec(subdivisions=1))
        b = make_desk_model(DeskModelSpec(subdivisions=1))
        assert np.array_equal(a.template, b.template)
        assert np.array_equal(a.skinning_weights, b.skinning_weights)

    def test_roundtrip_file(self, small_model, tmp_path):
        path = tmp_path / "model.hdm"
        save_head_model(path, small_model)
        loaded = load_head_model(path)
        for name in ("template", "faces", "shape_basis", "skinning_weights", "uv", "region_labels"):
            assert np.array_equal(getattr(loaded, name), getattr(small_model, name)), name

    def test_face_delete_and_extra(self, small_model, tmp_path):
        m = make_desk_model(DeskModelSpec(subdivisions=1))
        mask = np.zeros(m.n_faces, bool)
        mask[:5] = True
        m.face_delete_mask = mask
        m.extra_faces = m.faces[:2].copy()
        eff = m.effective_faces()
        assert len(eff) == m.n_faces - 5 + 2
        path = tmp_path / "model.hdm"
        save_head_model(path, m)
        loaded = load_head_model(path)
        assert len(loaded.effective_faces()) == len(eff)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.hdm"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ModelFormatError):
            load_head_model(p)


class TestSelfIntersection:
    def test_sphere_clean(self, small_model):
        assert count_self_intersections(small_model.template, small_model.faces) == 0

    def test_crossing_pair_detected(self):
        verts = np.array(
            [[0, 0, 0], [1, 0, 0], [0, 1, 0],
             [0.2, 0.2, -0.5], [0.8, 0.4, 0.5], [0.4, 0.8, 0.5]], np.float64)
        faces = np.array([[0, 1, 2], [3, 4, 5]], np.int64)
        assert count_self_intersections(verts, faces) == 1


def test_feature_init_variance(desk_model):
    rng = np.random.default_rng(7)
    state = init_avatar_state(desk_model, rng, texture_resolution=8)
    var = float(np.var(state.features))
    assert abs(var - 4e-4) < 0.1 * 4e-4
