"""Scikit-learn-compatible facade over the optimization engine.

``fit`` runs the optimization schedule over a pose dataset; ``transform``
renders RGB images for pose rows, so the avatar composes with sklearn
pipelines and model-selection utilities.  Hyperparameters follow sklearn
conventions (flat constructor arguments, ``get_params``/``set_params``).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .headmodel import ArticulationPose, DeskModelSpec, load_head_model, make_desk_model
from .objective import AlphaSchedule
from .trainloop import (
    Schedule,
    TrainConfig,
    render_avatar_rgb,
    run_optimization,
)
from .validation import as_pose_dataset


class AvatarOptimizer(TransformerMixin, BaseEstimator):
    """Optimize an articulated head avatar against a guidance signal.

    Parameters mirror the engine defaults at desk scale so a bare
    ``AvatarOptimizer().fit()`` finishes in seconds; pass paper-scale values
    explicitly for full runs.
    """

    def __init__(
        self,
        prompt: str = "",
        model_path: str | None = None,
        guidance: str = "mock",
        guidance_target: str | None = None,
        guidance_endpoint: str | None = None,
        total_iters: int = 60,
        initial_texture_iters: int = 20,
        dual_block: int = 20,
        texture_block: int = 10,
        lut_refresh: int = 10,
        alpha_ramp_iters: int = 20,
        lr_texture: float = 8e-3,
        lr_geometry: float = 1e-3,
        texture_resolution: int = 64,
        hi_resolution: int = 32,
        lo_resolution: int = 8,
        soft_resolution: int = 16,
        sigma: float = 1e-3,
        azimuth_range: float = 30.0,
        seed: int = 0,
    ):
        self.prompt = prompt
        self.model_path = model_path
        self.guidance = guidance
        self.guidance_target = guidance_target
        self.guidance_endpoint = guidance_endpoint
        self.total_iters = total_iters
        self.initial_texture_iters = initial_texture_iters
        self.dual_block = dual_block
        self.texture_block = texture_block
        self.lut_refresh = lut_refresh
        self.alpha_ramp_iters = alpha_ramp_iters
        self.lr_texture = lr_texture
        self.lr_geometry = lr_geometry
        self.texture_resolution = texture_resolution
        self.hi_resolution = hi_resolution
        self.lo_resolution = lo_resolution
        self.soft_resolution = soft_resolution
        self.sigma = sigma
        self.azimuth_range = azimuth_range
        self.seed = seed

    def _build_config(self) -> TrainConfig:
        return TrainConfig(
            prompt=self.prompt,
            seed=self.seed,
            model={"kind": "file", "path": self.model_path} if self.model_path
            else {"kind": "desk", "subdivisions": 1},
            schedule=Schedule(
                total_iters=self.total_iters,
                initial_texture_iters=self.initial_texture_iters,
                dual_block=self.dual_block,
                texture_block=self.texture_block,
                lut_refresh=self.lut_refresh,
                azimuth_min=-self.azimuth_range,
                azimuth_max=self.azimuth_range,
            ),
            alpha=AlphaSchedule(ramp_iters=self.alpha_ramp_iters),
            lr_texture=self.lr_texture,
            lr_geometry=self.lr_geometry,
            texture_resolution=self.texture_resolution,
            hi_resolution=self.hi_resolution,
            lo_resolution=self.lo_resolution,
            soft_resolution=self.soft_resolution,
            sigma=self.sigma,
            guidance=self.guidance,
            guidance_target=self.guidance_target,
            guidance_endpoint=self.guidance_endpoint,
        )

    def fit(self, X=None, y=None):
        """Run the optimization schedule; X is an optional pose dataset
        (rows of expression + joint values) sampled during training."""
        config = self._build_config()
        model = load_head_model(self.model_path) if self.model_path \
            else make_desk_model(DeskModelSpec(subdivisions=1))
        dataset = as_pose_dataset(X, model)
        result = run_optimization(config, model=model, dataset=dataset)
        self.model_ = model
        self.config_ = config
        self.state_ = result.state
        self.events_ = result.events
        self.n_features_in_ = model.n_expression + 3 * model.n_joints
        return self

    def transform(self, X) -> np.ndarray:
        """Render one RGB image per pose row: [n_samples, 3, H, W]."""
        check_is_fitted(self, "state_")
        dataset = as_pose_dataset(X, self.model_)
        frames = []
        for rec in dataset.records:
            pose = ArticulationPose(psi=rec.psi, phi=rec.phi,
                                    radius=self.config_.schedule.camera_radius)
            frames.append(render_avatar_rgb(self.model_, self.state_, pose, self.config_))
        return np.stack(frames)
