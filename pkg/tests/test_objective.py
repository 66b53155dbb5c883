import numpy as np
import pytest

from headopt.decode import LinearDecoder
from headopt.diffcore import gradcheck, init_mlp
from headopt.errors import ShapeError
from headopt.headmodel import (
    ArticulationPose,
    AvatarState,
    build_adjacency,
    enlarge_template,
    init_avatar_state,
    posed_vertices,
)
from headopt.objective import (
    AlphaSchedule,
    RegWeights,
    alpha_at,
    blend_guidance_input,
    loss_lap,
    loss_off,
    loss_prior,
    shaded_to_features,
    total_geometry_loss,
)
from headopt.raster import RasterSettings
from headopt.segmask import MaskLUT


class TestAlphaSchedule:
    def test_ramp_values(self):
        sched = AlphaSchedule()
        rng = np.random.default_rng(0)
        assert alpha_at(sched, 0, rng) == 0.0
        assert alpha_at(sched, 2000, rng) == 0.5
        assert alpha_at(sched, 3999, rng) == pytest.approx(3999 / 4000)

    def test_post_ramp_uniform(self):
        sched = AlphaSchedule()
        rng = np.random.default_rng(1)
        draws = np.array([alpha_at(sched, 10000, rng) for _ in range(1000)])
        assert np.all((draws >= 0.6) & (draws <= 1.0))
        assert 0.78 <= draws.mean() <= 0.82

    def test_validation(self):
        with pytest.raises(ShapeError):
            AlphaSchedule(post_lo=0.8, post_hi=0.2)


class TestBlend:
    def test_alpha_one_passthrough(self, rng):
        f = rng.normal(size=(4, 8, 8)).astype(np.float32)
        s = rng.normal(size=(4, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(blend_guidance_input(f, s, 1.0), f)

    def test_alpha_zero_pure_shading(self, rng):
        f = rng.normal(size=(4, 8, 8)).astype(np.float32)
        s = rng.normal(size=(4, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(blend_guidance_input(f, s, 0.0), s)

    def test_midpoint(self, rng):
        f = rng.normal(size=(4, 4, 4)).astype(np.float32)
        s = rng.normal(size=(4, 4, 4)).astype(np.float32)
        np.testing.assert_allclose(blend_guidance_input(f, s, 0.5), 0.5 * (f + s), atol=1e-6)

    def test_gradient_scales_by_alpha(self, rng):
        # blended is affine in F: blend(F + d) - blend(F) == alpha * d exactly
        f = rng.normal(size=(4, 4, 4)).astype(np.float32)
        s = rng.normal(size=(4, 4, 4)).astype(np.float32)
        d = rng.normal(size=(4, 4, 4)).astype(np.float32)
        alpha = 0.7
        lhs = blend_guidance_input(f + d, s, alpha) - blend_guidance_input(f, s, alpha)
        np.testing.assert_allclose(lhs, np.float32(alpha) * d, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            blend_guidance_input(np.zeros((4, 8, 8), np.float32), np.zeros((4, 4, 4), np.float32), 0.5)


class TestShadedToFeatures:
    def test_pinv_roundtrip(self, rng):
        w = rng.normal(size=(3, 4)).astype(np.float32)
        dec = LinearDecoder(w, rng.normal(size=3).astype(np.float32) * 0.1)
        shaded = rng.uniform(0.2, 0.8, (3, 8, 8)).astype(np.float32)
        feat = shaded_to_features(shaded, dec)
        assert feat.shape == (4, 8, 8)
        # decoding the mapped features reproduces the shaded image (pre-clamp)
        rgb = np.einsum("cf,fhw->chw", dec.weight, feat) + dec.bias[:, None, None]
        np.testing.assert_allclose(rgb, shaded, atol=1e-4)

    def test_fallback_replicates(self):
        shaded = np.random.default_rng(0).uniform(size=(3, 4, 4)).astype(np.float32)
        feat = shaded_to_features(shaded, None)
        assert feat.shape == (4, 4, 4)
        np.testing.assert_array_equal(feat[:3], shaded)
        np.testing.assert_array_equal(feat[3], shaded[0])

    def test_rank_deficient_falls_back(self):
        dec = LinearDecoder(np.zeros((3, 4), np.float32), np.zeros(3, np.float32))
        shaded = np.ones((3, 2, 2), np.float32) * 0.5
        feat = shaded_to_features(shaded, dec)
        np.testing.assert_array_equal(feat[:3], shaded)


class TestLossOff:
    def test_zero(self):
        loss, grad = loss_off(np.zeros((10, 3), np.float32))
        assert loss == 0.0 and np.all(grad == 0)

    def test_constant_point_one(self):
        loss, _ = loss_off(np.full((7, 3), 0.1, np.float32))
        assert abs(loss - 0.1) < 1e-7

    def test_matches_scalar_loop(self, rng):
        off = rng.normal(size=(5, 3)).astype(np.float32)
        loss, grad = loss_off(off)
        want = sum(abs(float(off[i, j])) for i in range(5) for j in range(3)) / 15
        assert abs(loss - want) < 1e-6
        np.testing.assert_allclose(grad, np.sign(off) / 15.0, atol=1e-7)


def grid_mesh(n=4):
    idx = lambda r, c: n * r + c  # noqa: E731
    verts = np.array([[c, r, 0.0] for r in range(n) for c in range(n)], np.float32)
    faces = []
    for r in range(n - 1):
        for c in range(n - 1):
            faces.append([idx(r, c), idx(r, c + 1), idx(r + 1, c)])
            faces.append([idx(r, c + 1), idx(r + 1, c + 1), idx(r + 1, c)])
    return verts, np.array(faces, np.int32)


class TestLossLap:
    def test_planar_grid_interior_rows_zero(self):
        verts, faces = grid_mesh(4)
        adj = build_adjacency(faces, len(verts))
        from headopt.headmodel import uniform_laplacian
        lap = uniform_laplacian(adj, verts)
        interior = [5, 6, 9, 10]
        np.testing.assert_allclose(lap[interior], 0.0, atol=1e-6)

    def test_homogeneous(self, small_model, rng):
        adj = build_adjacency(small_model.faces, small_model.n_vertices)
        v = rng.normal(size=(small_model.n_vertices, 3)).astype(np.float32)
        l1, _ = loss_lap(adj, v)
        l2, _ = loss_lap(adj, 2.0 * v)
        assert abs(l2 - 2.0 * l1) < 1e-6 * max(1.0, l2)

    def test_matches_adjacency_oracle(self, small_model, rng):
        adj = build_adjacency(small_model.faces, small_model.n_vertices)
        v = rng.normal(size=(small_model.n_vertices, 3)).astype(np.float32)
        loss, _ = loss_lap(adj, v)
        neigh = {i: set() for i in range(small_model.n_vertices)}
        for a, b, c in small_model.faces:
            neigh[a] |= {b, c}
            neigh[b] |= {a, c}
            neigh[c] |= {a, b}
        acc = 0.0
        for i in range(small_model.n_vertices):
            row = v[sorted(neigh[i])].astype(np.float64).mean(axis=0) - v[i]
            acc += np.abs(row).sum()
        assert abs(loss - acc / small_model.n_vertices) < 1e-5

    @pytest.mark.parametrize("seed", [0, 1])
    def test_gradcheck(self, small_model, seed):
        rng = np.random.default_rng(seed)
        adj = build_adjacency(small_model.faces, small_model.n_vertices)
        v = rng.normal(size=(small_model.n_vertices, 3)).astype(np.float32)

        def f(p):
            loss, grad = loss_lap(adj, p["v"])
            return loss, {"v": grad}

        report = gradcheck(f, {"v": v}, h=1e-3, tol=1e-3, max_entries_per_param=40,
                           rng=np.random.default_rng(0))
        assert report.passed, str(report)


class TestLossPrior:
    def test_zero_at_template(self, small_model):
        adj = build_adjacency(small_model.faces, small_model.n_vertices)
        loss, grad = loss_prior(adj, small_model.template, small_model.template,
                                small_model.region_labels, np.array([1.0, 0.1, 0.5, 0.5], np.float32))
        assert loss == 0.0 and np.all(grad == 0)

    def test_region_ratio_scalp_vs_other(self, desk_model):
        # two vertices with identical local structure (degree-6, degree-6
        # neighbours, single-region 1-ring): perturbation energy ratio is the
        # region scale ratio 0.1
        adj = build_adjacency(desk_model.faces, desk_model.n_vertices)
        scale = np.array([1.0, 0.1, 0.5, 0.5], np.float32)
        deg = adj.degrees.astype(int)

        def candidates(label):
            out = []
            for i in range(desk_model.n_vertices):
                if desk_model.region_labels[i] != label or deg[i] != 6:
                    continue
                ns = adj.neighbors[adj.offsets[i]:adj.offsets[i + 1]]
                if np.all(desk_model.region_labels[ns] == label) and np.all(deg[ns] == 6):
                    out.append(i)
            return out

        scalp = candidates(1)
        other = candidates(0)
        assert scalp and other, "desk model must offer clean test vertices"
        delta = 0.01

        def energy(vid):
            v = desk_model.template.copy()
            v[vid, 1] += delta
            loss, _ = loss_prior(adj, v, desk_model.template, desk_model.region_labels, scale)
            return loss

        ratio = energy(scalp[0]) / energy(other[0])
        assert abs(ratio - 0.1) < 0.01

    def test_matches_scalar_oracle(self, small_model, rng):
        adj = build_adjacency(small_model.faces, small_model.n_vertices)
        scale = np.array([1.0, 0.1, 0.5, 0.5], np.float32)
        v = (small_model.template + rng.normal(0, 0.01, (small_model.n_vertices, 3))).astype(np.float32)
        loss, _ = loss_prior(adj, v, small_model.template, small_model.region_labels, scale)
        neigh = {i: set() for i in range(small_model.n_vertices)}
        for a, b, c in small_model.faces:
            neigh[a] |= {b, c}
            neigh[b] |= {a, c}
            neigh[c] |= {a, b}
        acc = 0.0
        for i in range(small_model.n_vertices):
            ns = sorted(neigh[i])
            lv = v[ns].astype(np.float64).mean(axis=0) - v[i]
            lt = small_model.template[ns].astype(np.float64).mean(axis=0) - small_model.template[i]
            acc += float(scale[small_model.region_labels[i]]) * np.sum((lv - lt) ** 2)
        assert abs(loss - acc / small_model.n_vertices) < 1e-6


class TestTotalGeometryLoss:
    def make_setup(self, model, rng, weights=None):
        state = init_avatar_state(model, rng, texture_resolution=8)
        state.mlp = init_mlp(3 + state.feature_dim, rng, zero_final=False)
        for w in state.mlp.weights:
            w *= 0.2
        enlarge = enlarge_template(model, -0.4, 1)
        res = 16
        yy, xx = np.mgrid[0:res * 8, 0:res * 8]
        ref = (((yy - 64) ** 2 + (xx - 64) ** 2) <= 40**2).astype(np.float32)
        lut = MaskLUT(ref[None], 0, 0, 1)
        settings = RasterSettings(mode="soft", sigma=1e-3, resolution=res)
        weights = weights or RegWeights(lambda1=0.5, lambda2=5.0, lambda3=5.0, seg_lambda=100.0)
        return state, enlarge, lut, settings, weights

    def test_components_recombine(self, small_model, rng):
        state, enlarge, lut, settings, weights = self.make_setup(small_model, rng)
        res = total_geometry_loss(small_model, state, lut, 0.0, weights, settings,
                                  enlarge_offsets=enlarge)
        want = (res.parts["seg"] + weights.lambda1 * res.parts["off"]
                + weights.lambda2 * res.parts["lap"] + weights.lambda3 * res.parts["prior"])
        assert abs(res.total - want) < 1e-6 * max(1.0, abs(want))
        assert res.parts["off"] > 0 and res.parts["lap"] > 0

    def test_all_zero_when_everything_matches(self, small_model, rng):
        # zero-weight regularizers + reference equal to the rendered mask
        state = init_avatar_state(small_model, rng, texture_resolution=8)
        settings = RasterSettings(mode="soft", sigma=1e-3, resolution=16)
        from headopt.raster import Camera, render_soft_mask
        pose = ArticulationPose.canonical(small_model)
        verts = posed_vertices(small_model, state, pose).vertices
        cam = Camera.from_pose(pose, resolution=16)
        mask, _ = render_soft_mask(verts, small_model.faces, cam, settings)
        from headopt.diffcore import bilinear_resize
        ref = bilinear_resize(mask[None], 128, 128)[0]
        lut = MaskLUT(ref[None].copy(), 0, 0, 1)
        weights = RegWeights(lambda1=0.0, lambda2=0.0, lambda3=0.0, seg_lambda=1000.0)
        res = total_geometry_loss(small_model, state, lut, 0.0, weights, settings)
        assert res.total < 1e-10

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradcheck_beta(self, small_model, seed):
        rng = np.random.default_rng(seed)
        state, enlarge, lut, settings, weights = self.make_setup(small_model, rng)

        def f(p):
            st = AvatarState(p["beta"], state.mlp, state.features, state.texture)
            res = total_geometry_loss(small_model, st, lut, 0.0, weights, settings,
                                      enlarge_offsets=enlarge)
            return res.total, {"beta": res.d_beta}

        beta = rng.normal(0, 0.2, small_model.n_shape).astype(np.float32)
        report = gradcheck(f, {"beta": beta}, h=1e-3, tol=1e-2)
        assert report.passed, str(report)

    def test_gradcheck_features_and_mlp(self, small_model):
        from test_diffcore import nudge_relu_preacts

        rng = np.random.default_rng(5)
        state, enlarge, lut, settings, weights = self.make_setup(small_model, rng)
        nudge_relu_preacts(state.mlp, np.concatenate([small_model.template, state.features], axis=1),
                           margin=0.02)

        def f(p):
            st = AvatarState(state.beta, state.mlp, p["features"], state.texture)
            res = total_geometry_loss(small_model, st, lut, 0.0, weights, settings,
                                      enlarge_offsets=enlarge)
            return res.total, {"features": res.d_features}

        # float32 mask quantization puts the FD noise floor near 1e-4 per
        # entry; a 2e-3 step keeps the check inside the 2e-2 vertex-geometry
        # tolerance without masking real errors
        report = gradcheck(f, {"features": state.features}, h=2e-3, tol=2e-2,
                           max_entries_per_param=30, rng=np.random.default_rng(1))
        assert report.passed, str(report)

    def test_geometry_loss_never_touches_texture(self, small_model, rng):
        state, enlarge, lut, settings, weights = self.make_setup(small_model, rng)
        before = state.texture.copy()
        res = total_geometry_loss(small_model, state, lut, 0.0, weights, settings,
                                  enlarge_offsets=enlarge)
        assert np.array_equal(state.texture, before)
        # result exposes adjoints only for geometry variables
        assert set(vars(res).keys()) == {"total", "parts", "mlp_grads", "d_beta", "d_features", "soft_mask"}


def test_reg_weights_validation():
    with pytest.raises(ShapeError):
        RegWeights(lambda1=-1.0)


def test_region_scale_defaults():
    w = RegWeights()
    np.testing.assert_allclose(w.region_scale, [1.0, 0.1, 0.5, 0.5])
    assert w.lambda1 == 0.5 and w.lambda2 == 5000.0 and w.lambda3 == 5000.0 and w.seg_lambda == 1000.0
