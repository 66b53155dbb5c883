"""Finite-difference verification suites over the engine's adjoints.

Each suite builds seeded desk-scale instances and compares every hand-derived
backward pass against central differences.  The CLI exposes them behind
``gradcheck --suite``; the acceptance tests run them with the spec
tolerances.  FD losses are evaluated through float64 twins where the float32
forward would put quantization noise above the tolerance; the gradients
under test always come from the production float32 backward passes.
"""
from __future__ import annotations

import numpy as np

from .diffcore import (
    GradcheckReport,
    MlpParams,
    bilinear_resize,
    bilinear_resize_backward,
    gradcheck,
    init_mlp,
    mlp_backward,
)
from .headmodel import (
    ArticulationPose,
    AvatarState,
    DeskModelSpec,
    enlarge_template,
    init_avatar_state,
    make_desk_model,
    rodrigues,
)
from .objective import RegWeights, total_geometry_loss
from .raster import Camera, RasterSettings, render_features, render_soft_mask
from .segmask import MaskLUT, seg_loss

DEFAULT_SEEDS = (0, 1, 2)


def _nudge_relu_preacts(params: MlpParams, x: np.ndarray, margin: float = 0.05) -> None:
    # keep relu pre-activations away from the FD step so the check is valid
    for _ in range(10):
        h = x.astype(np.float32)
        moved = False
        for layer in range(len(params.weights) - 1):
            pre = h @ params.weights[layer].T + params.biases[layer]
            close = np.abs(pre) < margin
            if close.any():
                params.biases[layer][close.any(axis=0)] += np.float32(2 * margin)
                moved = True
                pre = h @ params.weights[layer].T + params.biases[layer]
            h = np.maximum(pre, 0)
        if not moved:
            return
    raise RuntimeError("could not stabilize relu pre-activations")


def _mlp_f64(params: MlpParams, x: np.ndarray) -> np.ndarray:
    h = x.astype(np.float64)
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.maximum(h @ w.astype(np.float64).T + b.astype(np.float64), 0.0)
    z = h @ params.weights[-1].astype(np.float64).T + params.biases[-1].astype(np.float64)
    return params.output_scale * np.tanh(z)


def suite_mlp(seeds=DEFAULT_SEEDS) -> list[tuple[str, GradcheckReport]]:
    """MLP layer parameters and inputs against central differences."""
    reports = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        params = init_mlp(5, rng, zero_final=False)
        x = rng.normal(size=(4, 5)).astype(np.float32)
        _nudge_relu_preacts(params, x)
        proj = rng.normal(size=(4, 3)).astype(np.float32)

        def f(p):
            mp = MlpParams([p[f"w{i}"] for i in range(4)], [p[f"b{i}"] for i in range(4)])
            loss = float(np.sum(_mlp_f64(mp, x) * proj))
            grads, _ = mlp_backward(mp, x, proj)
            out = {f"w{i}": grads.weights[i] for i in range(4)}
            out.update({f"b{i}": grads.biases[i] for i in range(4)})
            return loss, out

        report = gradcheck(f, params.named_arrays(), h=1e-3, tol=1e-3,
                           max_entries_per_param=25, rng=np.random.default_rng(seed + 100))
        reports.append((f"mlp-params[seed={seed}]", report))
    return reports


def suite_resize(seeds=DEFAULT_SEEDS) -> list[tuple[str, GradcheckReport]]:
    reports = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 5, 4)).astype(np.float32)
        proj = rng.normal(size=(2, 3, 6)).astype(np.float32)

        def f(p):
            out = bilinear_resize(p["x"], 3, 6)
            loss = float(np.sum(out.astype(np.float64) * proj))
            return loss, {"x": bilinear_resize_backward(p["x"].shape, proj)}

        reports.append((f"bilinear-resize[seed={seed}]", gradcheck(f, {"x": x}, h=1e-3, tol=1e-3)))
    return reports


def suite_raster(seeds=DEFAULT_SEEDS) -> list[tuple[str, GradcheckReport]]:
    """Texture sampling adjoint on a 16x16 render."""
    reports = []
    faces = np.array([[0, 1, 2]], np.int32)
    uv = np.array([[0.15, 0.2], [0.85, 0.25], [0.5, 0.85]], np.float32)
    cam = Camera(resolution=16)
    tri = np.array([[-0.09, -0.09, 0], [0.09, -0.09, 0], [0.0, 0.09, 0]], np.float32)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        tex = rng.uniform(0.2, 0.8, (4, 8, 8)).astype(np.float32)
        proj = rng.normal(size=(4, 16, 16)).astype(np.float32)

        def f(p):
            out = render_features(tri, faces, uv, p["tex"], cam)
            loss = float(np.sum(out.feature_image.astype(np.float64) * proj))
            return loss, {"tex": out.texture_backward(proj)}

        reports.append((f"texture-sampling[seed={seed}]",
                        gradcheck(f, {"tex": tex}, h=1e-3, tol=1e-3,
                                  max_entries_per_param=40, rng=np.random.default_rng(seed + 7))))
    return reports


def suite_softmask(seeds=DEFAULT_SEEDS) -> list[tuple[str, GradcheckReport]]:
    """Soft-silhouette vertex adjoints (vertex-geometry tolerance)."""
    reports = []
    faces = np.array([[0, 1, 2]], np.int32)
    cam = Camera(resolution=8)
    settings = RasterSettings(mode="soft", sigma=2e-3, resolution=8)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        tri = np.array([[-0.06, -0.05, 0], [0.06, -0.05, 0], [0.0, 0.07, 0]], np.float32)
        tri += rng.normal(0, 0.008, tri.shape).astype(np.float32)

        def f(p):
            mask, backward = render_soft_mask(p["v"], faces, cam, settings)
            return float(np.sum(mask.astype(np.float64))), {"v": backward(np.ones_like(mask))}

        reports.append((f"soft-mask-vertices[seed={seed}]",
                        gradcheck(f, {"v": tri}, h=1e-4, tol=2e-2)))
    return reports


def suite_seg(seeds=DEFAULT_SEEDS) -> list[tuple[str, GradcheckReport]]:
    """Vertex adjoints through the full silhouette loss."""
    reports = []
    faces = np.array([[0, 1, 2]], np.int32)
    cam = Camera(resolution=8)
    settings = RasterSettings(mode="soft", sigma=2e-3, resolution=8)
    yy, xx = np.mgrid[0:16, 0:16]
    ref = (((yy - 8.0) ** 2 + (xx - 8.0) ** 2) <= 25).astype(np.float32)
    lut = MaskLUT(ref[None], 0, 0, 1)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        tri = np.array([[-0.06, -0.05, 0], [0.06, -0.05, 0], [0.0, 0.07, 0]], np.float32)
        tri += rng.normal(0, 0.008, tri.shape).astype(np.float32)

        def f(p):
            mask, backward = render_soft_mask(p["v"], faces, cam, settings)
            loss, d_mask = seg_loss(lut, mask, 0.0)
            return loss, {"v": backward(d_mask)}

        reports.append((f"seg-loss-vertices[seed={seed}]",
                        gradcheck(f, {"v": tri}, h=1e-4, tol=2e-2)))
    return reports


def _desk_setup(seed: int):
    model = make_desk_model(DeskModelSpec(subdivisions=1))
    rng = np.random.default_rng(seed)
    state = init_avatar_state(model, rng, texture_resolution=8)
    state.mlp = init_mlp(3 + state.feature_dim, rng, zero_final=False)
    for w in state.mlp.weights:
        w *= 0.2
    state.beta = rng.normal(0, 0.2, model.n_shape).astype(np.float32)
    _nudge_relu_preacts(state.mlp, np.concatenate([model.template, state.features], axis=1),
                        margin=0.02)
    return model, state, rng


def suite_geom(seeds=DEFAULT_SEEDS) -> list[tuple[str, GradcheckReport]]:
    """Combined geometry loss adjoints for beta and features."""
    reports = []
    for seed in seeds:
        model, state, rng = _desk_setup(seed)
        enlarge = enlarge_template(model, -0.4, 1)
        res = 16
        yy, xx = np.mgrid[0:res * 8, 0:res * 8]
        ref = (((yy - 64) ** 2 + (xx - 64) ** 2) <= 40**2).astype(np.float32)
        lut = MaskLUT(ref[None], 0, 0, 1)
        settings = RasterSettings(mode="soft", sigma=1e-3, resolution=res)
        weights = RegWeights(lambda1=0.5, lambda2=5.0, lambda3=5.0, seg_lambda=100.0)

        def f_beta(p):
            st = AvatarState(p["beta"], state.mlp, state.features, state.texture)
            res_ = total_geometry_loss(model, st, lut, 0.0, weights, settings,
                                       enlarge_offsets=enlarge)
            return res_.total, {"beta": res_.d_beta}

        reports.append((f"geometry-loss-beta[seed={seed}]",
                        gradcheck(f_beta, {"beta": state.beta}, h=1e-3, tol=2e-2)))

        def f_feat(p):
            st = AvatarState(state.beta, state.mlp, p["features"], state.texture)
            res_ = total_geometry_loss(model, st, lut, 0.0, weights, settings,
                                       enlarge_offsets=enlarge)
            return res_.total, {"features": res_.d_features}

        reports.append((f"geometry-loss-features[seed={seed}]",
                        gradcheck(f_feat, {"features": state.features}, h=2e-3, tol=2e-2,
                                  max_entries_per_param=20, rng=np.random.default_rng(seed + 9))))
    return reports


def suite_posed(seeds=DEFAULT_SEEDS) -> list[tuple[str, GradcheckReport]]:
    """Beta / feature / MLP adjoints through blendshape + offsets + skinning."""
    from .headmodel import posed_vertices

    reports = []
    for seed in seeds:
        model, state, rng = _desk_setup(seed)
        pose = ArticulationPose(psi=rng.normal(0, 0.3, model.n_expression),
                                phi=rng.normal(0, 0.2, (model.n_joints, 3)))
        proj = rng.normal(size=(model.n_vertices, 3)).astype(np.float32)

        from .headmodel import _joint_world_transforms

        rel = _joint_world_transforms(model, pose.phi)
        skin_rot = np.einsum("vj,jab->vab", model.skinning_weights.astype(np.float64), rel[:, :3, :3])
        skin_t = model.skinning_weights.astype(np.float64) @ rel[:, :3, 3]

        def loss_f64(beta, mlp, features):
            offs = _mlp_f64(mlp, np.concatenate([model.template, features], axis=1))
            rest = model.template.astype(np.float64)
            rest = rest + model.shape_basis.astype(np.float64) @ np.asarray(beta, np.float64)
            rest = rest + model.expression_basis.astype(np.float64) @ np.asarray(pose.psi, np.float64)
            feat = (rodrigues(pose.phi.astype(np.float64))[1:] - np.eye(3)).reshape(-1)
            rest = rest + model.pose_basis.astype(np.float64) @ feat + offs
            posed = np.einsum("vab,vb->va", skin_rot, rest) + skin_t
            return float(np.sum(posed * proj))

        def f(p):
            mlp = MlpParams([p[f"w{i}"] for i in range(4)], [p[f"b{i}"] for i in range(4)])
            st = AvatarState(p["beta"], mlp, p["features"], state.texture)
            res = posed_vertices(model, st, pose)
            grads, d_beta, d_feat = res.backward(proj)
            loss = loss_f64(p["beta"], mlp, p["features"])
            out = {"beta": d_beta, "features": d_feat}
            for i in range(4):
                out[f"w{i}"] = grads.weights[i]
                out[f"b{i}"] = grads.biases[i]
            return loss, out

        params = {"beta": state.beta, "features": state.features, **state.mlp.named_arrays()}
        reports.append((f"posed-vertices[seed={seed}]",
                        gradcheck(f, params, h=1e-3, tol=1e-3, max_entries_per_param=20,
                                  rng=np.random.default_rng(seed + 11))))
    return reports


SUITES = {
    "mlp": (suite_mlp, suite_resize),
    "raster": (suite_raster, suite_softmask),
    "seg": (suite_seg,),
    "geom": (suite_posed, suite_geom),
}


def run_suites(names, seeds=DEFAULT_SEEDS):
    """Run the named suites ('all' for everything); yields (label, report)."""
    if "all" in names:
        names = list(SUITES)
    out = []
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown gradcheck suite {name!r}")
        for fn in SUITES[name]:
            out.extend(fn(seeds))
    return out
