"""Optimization schedule and loop.

Phases: an initial texture-only block, then alternating dual (geometry +
texture) and texture-only blocks.  Texture steps push guidance gradients
into the texture through the hi/lo render path; dual steps additionally
render a soft silhouette at the canonical expression and propagate the
silhouette + regularizer gradients into (mlp, beta, features).  Split Adam
learning rates per parameter group.  Everything an iteration consumes is a
pure function of (seed, iteration), so runs are bit-reproducible and
checkpoint resume is exact.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import fileio
from .decode import LinearDecoder, default_decoder, load_decoder_config
from .diffcore import F32, MlpParams, as_f32, bilinear_resize
from .errors import ConfigError, GuidanceError, NumericsError
from .guidance import AnalyticTargetProvider, GuidanceRequest, MockNoiseProvider, RemoteProvider
from .headmodel import (
    ArticulationPose,
    AvatarState,
    DeskModelSpec,
    HeadModel,
    enlarge_template,
    init_avatar_state,
    load_head_model,
    make_desk_model,
)
from .objective import AlphaSchedule, RegWeights, alpha_at, blend_guidance_input, shaded_to_features, total_geometry_loss
from .protocol import ProtocolClient
from .raster import BackgroundSpec, Camera, RasterSettings, render_hi_lo, render_shaded
from .segmask import LutConfig, MaskLUT, build_mask_lut, builtin_segmenter


class Phase(Enum):
    TEXTURE_ONLY = "texture"
    DUAL = "dual"


@dataclass
class Schedule:
    total_iters: int = 20000
    initial_texture_iters: int = 6000
    dual_block: int = 4000
    texture_block: int = 2000
    lut_refresh: int = 2000
    azimuth_min: float = -30.0
    azimuth_max: float = 30.0
    elevation: float = 0.0
    camera_radius: float = 0.7


def phase_of(schedule: Schedule, iteration: int) -> Phase:
    """Phase at an iteration; a pure function of the index."""
    if iteration < schedule.initial_texture_iters:
        return Phase.TEXTURE_ONLY
    block = schedule.dual_block + schedule.texture_block
    if block <= 0 or schedule.dual_block <= 0:
        return Phase.TEXTURE_ONLY
    k = (iteration - schedule.initial_texture_iters) % block
    return Phase.DUAL if k < schedule.dual_block else Phase.TEXTURE_ONLY


def dual_iterations_before(schedule: Schedule, iteration: int) -> int:
    """How many dual iterations precede `iteration`."""
    if iteration <= schedule.initial_texture_iters:
        return 0
    block = schedule.dual_block + schedule.texture_block
    if block <= 0 or schedule.dual_block <= 0:
        return 0
    j = iteration - schedule.initial_texture_iters
    full, rem = divmod(j, block)
    return full * schedule.dual_block + min(rem, schedule.dual_block)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class OptimState:
    slots: dict[str, AdamSlot] = field(default_factory=dict)
    lr_texture: float = 8e-3
    lr_geometry: float = 1e-4
    adam: AdamConfig = field(default_factory=AdamConfig)

    def slot_for(self, name: str, param: np.ndarray) -> AdamSlot:
        if name not in self.slots:
            self.slots[name] = AdamSlot(np.zeros_like(param), np.zeros_like(param))
        slot = self.slots[name]
        if slot.m.shape != param.shape:
            raise ConfigError(f"optimizer slot {name}: moment shape {slot.m.shape} vs param {param.shape}")
        return slot


def adam_step(slot: AdamSlot, param: np.ndarray, grad: np.ndarray, lr: float, cfg: AdamConfig) -> None:
    """In-place bias-corrected Adam update (float32 arithmetic)."""
    g = as_f32(grad)
    b1, b2 = F32(cfg.beta1), F32(cfg.beta2)
    slot.step += 1
    slot.m *= b1
    slot.m += (F32(1.0) - b1) * g
    slot.v *= b2
    slot.v += (F32(1.0) - b2) * g * g
    mhat = slot.m / F32(1.0 - cfg.beta1 ** slot.step)
    vhat = slot.v / F32(1.0 - cfg.beta2 ** slot.step)
    param -= F32(lr) * mhat / (np.sqrt(vhat) + F32(cfg.eps))


# ---------------------------------------------------------------------------
# Pose dataset (JSON lines: {"psi": [...], "phi": [...]})
# ---------------------------------------------------------------------------


@dataclass
class PoseRecord:
    psi: np.ndarray
    phi: np.ndarray  # [J,3]


@dataclass
class PoseDataset:
    records: list[PoseRecord]
    source: str = ""

    def __post_init__(self):
        if not self.records:
            raise ConfigError("pose dataset is empty")
        for i, r in enumerate(self.records):
            if not (np.all(np.isfinite(r.psi)) and np.all(np.isfinite(r.phi))):
                raise ConfigError(f"pose record {i} contains non-finite values")

    @classmethod
    def canonical_only(cls, model: HeadModel) -> "PoseDataset":
        return cls([PoseRecord(np.zeros(model.n_expression, F32), np.zeros((model.n_joints, 3), F32))],
                   source="canonical")


def load_pose_dataset(path) -> PoseDataset:
    records = []
    with Path(path).open() as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                psi = as_f32(obj["psi"])
                phi = as_f32(obj["phi"]).reshape(-1, 3)
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ConfigError(f"{path}:{line_no}: bad pose record: {exc}") from exc
            records.append(PoseRecord(psi, phi))
    return PoseDataset(records, source=str(path))


def save_pose_dataset(path, dataset: PoseDataset) -> None:
    with Path(path).open("w") as fh:
        for r in dataset.records:
            fh.write(json.dumps({"psi": r.psi.tolist(), "phi": r.phi.tolist()}) + "\n")


def make_desk_pose_dataset(model: HeadModel, n: int = 32, seed: int = 0) -> PoseDataset:
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        psi = rng.normal(0, 0.4, model.n_expression).astype(F32)
        phi = np.zeros((model.n_joints, 3), F32)
        phi[1:] = rng.normal(0, 0.15, (model.n_joints - 1, 3)).astype(F32)
        records.append(PoseRecord(psi, phi))
    return PoseDataset(records, source=f"desk(seed={seed})")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    prompt: str = ""
    prompt_prefix: str = "a photo of the face of "
    seed: int = 0
    out_dir: str | None = None
    model: dict = field(default_factory=lambda: {"kind": "desk", "subdivisions": 2})
    pose_dataset: str | None = None
    schedule: Schedule = field(default_factory=Schedule)
    alpha: AlphaSchedule = field(default_factory=AlphaSchedule)
    weights: RegWeights = field(default_factory=RegWeights)
    lr_texture: float = 8e-3
    lr_geometry: float = 1e-4
    adam: AdamConfig = field(default_factory=AdamConfig)
    texture_resolution: int = 512
    feature_dim: int = 32
    feature_init_sigma: float = 0.02
    hi_resolution: int = 512
    lo_resolution: int = 64
    soft_resolution: int = 64
    fov_deg: float = 25.0
    sigma: float = 1e-4
    gamma: float = 1e-4
    faces_per_pixel: int = 75
    enlarge_strength: float = -0.8
    enlarge_iterations: int = 3
    guidance: str = "analytic"  # analytic | mock | remote
    guidance_target: str | None = None  # TNS1 tensor path for the analytic provider
    guidance_endpoint: str | None = None
    guidance_timeout: float = 30.0
    guidance_retries: int = 2
    cfg_scale: float = 100.0
    t_min: float = 0.02
    t_max: float = 0.98
    decoder_config: str | None = None
    segment_endpoint: str | None = None
    segment_threshold: float = 0.1
    lut_background: float = -2.0  # uniform feature-space color for LUT renders
    bg_color_lo: float = -1.0
    bg_color_hi: float = 1.0
    checkpoint_every: int = 2000
    preview_every: int = 0  # canonical-view PNG cadence, 0 = off

    def to_dict(self) -> dict:
        out = asdict(self)
        out["weights"]["region_scale"] = self.weights.region_scale.tolist()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        try:
            if "schedule" in obj:
                obj["schedule"] = Schedule(**obj["schedule"])
            if "alpha" in obj:
                obj["alpha"] = AlphaSchedule(**obj["alpha"])
            if "weights" in obj:
                w = dict(obj["weights"])
                if "region_scale" in w:
                    w["region_scale"] = np.asarray(w["region_scale"], F32)
                obj["weights"] = RegWeights(**w)
            if "adam" in obj:
                obj["adam"] = AdamConfig(**obj["adam"])
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc


def load_train_config(path) -> TrainConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        try:
            return TrainConfig.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if path.suffix == ".toml":
        try:
            import tomllib  # Python >= 3.11
        except ImportError:
            try:
                import tomli as tomllib  # type: ignore[no-redef]
            except ImportError as exc:
                raise ConfigError("TOML configs need Python >= 3.11 or the 'tomli' package; "
                                  "use a JSON config instead") from exc
        return TrainConfig.from_dict(tomllib.loads(text))
    raise ConfigError(f"unknown config format {path.suffix!r} (use .json or .toml)")


def save_train_config(path, config: TrainConfig) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2))


def desk_train_config(**overrides) -> TrainConfig:
    """Small preset: every acceptance-scale run finishes in seconds."""
    base = dict(
        model={"kind": "desk", "subdivisions": 2},
        schedule=Schedule(total_iters=300, initial_texture_iters=100, dual_block=100,
                          texture_block=50, lut_refresh=100),
        texture_resolution=128,
        hi_resolution=64,
        lo_resolution=16,
        soft_resolution=32,
        sigma=4e-4,
        checkpoint_every=100,
        guidance="mock",
    )
    base.update(overrides)
    return TrainConfig(**base)


def build_model(config: TrainConfig) -> HeadModel:
    spec = config.model
    kind = spec.get("kind", "desk")
    if kind == "desk":
        fields = {k: v for k, v in spec.items() if k != "kind"}
        return make_desk_model(DeskModelSpec(**fields))
    if kind == "file":
        return load_head_model(spec["path"])
    raise ConfigError(f"unknown model kind {kind!r}")


def _build_decoder(config: TrainConfig) -> LinearDecoder:
    if config.decoder_config:
        return load_decoder_config(config.decoder_config)
    return default_decoder()


def _build_guidance(config: TrainConfig):
    if config.guidance == "analytic":
        if config.guidance_target:
            target = fileio.load_tensor(config.guidance_target)
        else:
            target = np.zeros((4, config.lo_resolution, config.lo_resolution), F32)
        return AnalyticTargetProvider(target)
    if config.guidance == "mock":
        return MockNoiseProvider(seed=config.seed)
    if config.guidance == "remote":
        if not config.guidance_endpoint:
            raise ConfigError("remote guidance requires guidance_endpoint")
        return RemoteProvider(config.guidance_endpoint, timeout=config.guidance_timeout,
                              retries=config.guidance_retries)
    raise ConfigError(f"unknown guidance kind {config.guidance!r}")


def _build_segmenter(config: TrainConfig):
    if config.segment_endpoint:
        client = ProtocolClient(config.segment_endpoint, timeout=config.guidance_timeout,
                                retries=config.guidance_retries)

        def remote_segmenter(rgb, *, bg, anchors, azimuth):
            bg_obj = {"kind": bg.kind, "color": bg.color.tolist(),
                      "color2": None if bg.color2 is None else bg.color2.tolist(),
                      "box_size_512": bg.box_size_512}
            return client.segment(rgb, anchors=anchors, bg=bg_obj) > 0.5

        return remote_segmenter

    def local_segmenter(rgb, *, bg, anchors, azimuth):
        return builtin_segmenter(rgb, bg=bg, anchors=anchors, azimuth=azimuth,
                                 threshold=config.segment_threshold)

    return local_segmenter


# ---------------------------------------------------------------------------
# Step input sampling (pure function of the per-iteration rng)
# ---------------------------------------------------------------------------


@dataclass
class StepInputs:
    record: PoseRecord
    azimuth: float
    elevation: float
    background: BackgroundSpec  # feature-space, 4 channels


def sample_step_inputs(schedule: Schedule, dataset: PoseDataset, rng: np.random.Generator,
                       color_lo: float = -1.0, color_hi: float = 1.0) -> StepInputs:
    record = dataset.records[int(rng.integers(len(dataset.records)))]
    azimuth = float(rng.uniform(schedule.azimuth_min, schedule.azimuth_max))
    if rng.random() < 0.5:
        bg = BackgroundSpec(rng.uniform(color_lo, color_hi, 4).astype(F32))
    else:
        c1 = rng.uniform(color_lo, color_hi, 4).astype(F32)
        c2 = rng.uniform(color_lo, color_hi, 4).astype(F32)
        box = int(rng.integers(15, 26))
        bg = BackgroundSpec(c1, kind="checker", color2=c2, box_size_512=box)
    return StepInputs(record, azimuth, schedule.elevation, bg)


def step_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


# ---------------------------------------------------------------------------
# Checkpoints (magic CKP1)
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    state: AvatarState
    optim: OptimState
    iteration: int
    seed: int
    config: dict
    lut: MaskLUT | None = None


def save_checkpoint(path, state: AvatarState, optim: OptimState, iteration: int,
                    seed: int, config: TrainConfig, lut: MaskLUT | None = None) -> None:
    arrays: dict[str, np.ndarray] = {
        "iteration": np.asarray(iteration, np.int64),
        "seed": np.asarray(seed, np.int64),
        "config_json": np.frombuffer(json.dumps(config.to_dict()).encode(), np.uint8).copy(),
    }
    for name, arr in state.named_arrays().items():
        arrays[f"state_{name}"] = arr
    for name, slot in optim.slots.items():
        arrays[f"adam_{name}_m"] = slot.m
        arrays[f"adam_{name}_v"] = slot.v
        arrays[f"adam_{name}_step"] = np.asarray(slot.step, np.int64)
    if lut is not None:
        arrays["lut_masks"] = lut.masks
        arrays["lut_meta"] = np.asarray(
            [lut.azimuth_min, lut.azimuth_max, lut.step, lut.built_at_iteration], np.float64)
    fileio.write_chunked(path, fileio.MAGIC_CHECKPOINT, arrays)


def load_checkpoint(path) -> Checkpoint:
    arrays = fileio.read_chunked(path, fileio.MAGIC_CHECKPOINT)
    config = json.loads(bytes(arrays["config_json"]).decode())
    n_layers = 4
    mlp = MlpParams(
        [as_f32(arrays[f"state_mlp_w{i}"]) for i in range(n_layers)],
        [as_f32(arrays[f"state_mlp_b{i}"]) for i in range(n_layers)],
    )
    state = AvatarState(
        beta=as_f32(arrays["state_beta"]),
        mlp=mlp,
        features=as_f32(arrays["state_features"]),
        texture=as_f32(arrays["state_texture"]),
    )
    optim = OptimState(lr_texture=config.get("lr_texture", 8e-3),
                       lr_geometry=config.get("lr_geometry", 1e-4),
                       adam=AdamConfig(**config.get("adam", {})))
    for key in arrays:
        if key.startswith("adam_") and key.endswith("_m"):
            name = key[len("adam_"):-len("_m")]
            optim.slots[name] = AdamSlot(
                as_f32(arrays[key]),
                as_f32(arrays[f"adam_{name}_v"]),
                int(arrays[f"adam_{name}_step"].item()),
            )
    lut = None
    if "lut_masks" in arrays:
        meta = arrays["lut_meta"]
        lut = MaskLUT(as_f32(arrays["lut_masks"]), float(meta[0]), float(meta[1]),
                      float(meta[2]), int(meta[3]))
    return Checkpoint(state, optim, int(arrays["iteration"].item()),
                      int(arrays["seed"].item()), config, lut)


# ---------------------------------------------------------------------------
# The optimization loop
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    state: AvatarState
    optim: OptimState
    events: list[dict]
    lut: MaskLUT | None
    iterations_run: int


GEOMETRY_PARAMS = ("beta", "features", "mlp_w0", "mlp_b0", "mlp_w1", "mlp_b1",
                   "mlp_w2", "mlp_b2", "mlp_w3", "mlp_b3")


def write_event_csv(path, events: list[dict]) -> None:
    columns = ["iteration", "phase", "alpha", "azimuth", "loss_seg", "loss_off",
               "loss_lap", "loss_prior", "loss_geom_total", "guidance_grad_norm",
               "lut_rebuilt", "skipped"]
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in events:
            writer.writerow(row)


def run_optimization(
    config: TrainConfig,
    model: HeadModel | None = None,
    guidance=None,
    segmenter=None,
    dataset: PoseDataset | None = None,
    resume: Checkpoint | str | None = None,
) -> RunResult:
    """Execute the schedule; returns the final state and the event log.

    Guidance failures skip the step (logged); a non-finite parameter aborts
    with a diagnostic checkpoint (when an output directory is configured).
    """
    model = model or build_model(config)
    decoder = _build_decoder(config)
    guidance = guidance or _build_guidance(config)
    segmenter = segmenter or _build_segmenter(config)
    if dataset is None:
        dataset = load_pose_dataset(config.pose_dataset) if config.pose_dataset \
            else PoseDataset.canonical_only(model)
    schedule = config.schedule
    enlarge = enlarge_template(model, config.enlarge_strength, config.enlarge_iterations) \
        if config.enlarge_iterations > 0 else None

    if isinstance(resume, (str, Path)):
        resume = load_checkpoint(resume)
    if resume is not None:
        state = resume.state.copy()
        optim = resume.optim
        optim.lr_texture, optim.lr_geometry = config.lr_texture, config.lr_geometry
        start_iter = resume.iteration
        lut = resume.lut
    else:
        rng_init = np.random.default_rng([config.seed, 0xA11CE])
        state = init_avatar_state(model, rng_init, feature_dim=config.feature_dim,
                                  texture_resolution=config.texture_resolution,
                                  feature_sigma=config.feature_init_sigma)
        optim = OptimState(lr_texture=config.lr_texture, lr_geometry=config.lr_geometry,
                           adam=config.adam)
        start_iter = 0
        lut = None

    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    soft_settings = RasterSettings(mode="soft", sigma=config.sigma, gamma=config.gamma,
                                   faces_per_pixel=config.faces_per_pixel,
                                   resolution=config.soft_resolution)
    lut_config = LutConfig(
        azimuth_min=schedule.azimuth_min, azimuth_max=schedule.azimuth_max, step=1.0,
        fov_deg=config.fov_deg, hi_resolution=config.hi_resolution,
        lo_resolution=config.lo_resolution, decoder=decoder,
        background=BackgroundSpec(np.full(4, config.lut_background, F32)),
    )
    prompt = config.prompt_prefix + config.prompt if config.prompt else config.prompt_prefix.strip()
    canonical = ArticulationPose.canonical(model, radius=schedule.camera_radius)

    def geometry_arrays(st: AvatarState) -> dict[str, np.ndarray]:
        out = {"beta": st.beta, "features": st.features}
        for k, a in st.mlp.named_arrays().items():
            out[f"mlp_{k}"] = a
        return out

    events: list[dict] = []

    def checkpoint_path(tag) -> Path:
        return out_dir / f"checkpoint_{tag}.ckpt"

    def finalize(iterations_run):
        if out_dir:
            write_event_csv(out_dir / "losses.csv", events)
            save_checkpoint(checkpoint_path("final"), state, optim,
                            start_iter + iterations_run, config.seed, config, lut)
        return RunResult(state, optim, events, lut, iterations_run)

    iterations_run = 0
    for it in range(start_iter, schedule.total_iters):
        phase = phase_of(schedule, it)
        rng_it = step_rng(config.seed, it)
        inputs = sample_step_inputs(schedule, dataset, rng_it,
                                    config.bg_color_lo, config.bg_color_hi)
        alpha = alpha_at(config.alpha, it, rng_it)
        guidance_seed = int(rng_it.integers(2**31))
        row = {
            "iteration": it, "phase": phase.value, "alpha": alpha,
            "azimuth": inputs.azimuth, "loss_seg": "", "loss_off": "", "loss_lap": "",
            "loss_prior": "", "loss_geom_total": "", "guidance_grad_norm": "",
            "lut_rebuilt": 0, "skipped": 0,
        }

        pose = ArticulationPose(psi=inputs.record.psi, phi=inputs.record.phi,
                                azimuth=inputs.azimuth, elevation=inputs.elevation,
                                radius=schedule.camera_radius)
        camera = Camera.from_pose(pose, fov_deg=config.fov_deg, resolution=config.hi_resolution)

        # texture path: hi render -> downsample -> alpha blend -> guidance
        f_lo, aux = render_hi_lo(model, state, pose, camera, config.lo_resolution,
                                 background=inputs.background, enlarge_offsets=enlarge)
        shaded_bg = inputs.background.map_channels(
            lambda c: np.clip(decoder.weight @ as_f32(c) + decoder.bias, 0.0, 1.0))
        shaded_hi = render_shaded(aux.vertices, model.effective_faces(), camera,
                                  background=shaded_bg)
        shaded_lo = bilinear_resize(shaded_hi, config.lo_resolution, config.lo_resolution)
        blended = blend_guidance_input(f_lo, shaded_to_features(shaded_lo, decoder), alpha)
        request = GuidanceRequest(blended, prompt=prompt, t_min=config.t_min,
                                  t_max=config.t_max, cfg_scale=config.cfg_scale,
                                  seed=guidance_seed)
        try:
            response = guidance(request)
            if not np.all(np.isfinite(response.grad)):
                raise GuidanceError("non-finite guidance gradient")
        except GuidanceError as exc:
            row["skipped"] = 1
            row["guidance_grad_norm"] = f"error: {exc}"
            events.append(row)
            iterations_run += 1
            continue
        row["guidance_grad_norm"] = float(np.linalg.norm(response.grad))
        # applied unscaled apart from the exact blend chain factor alpha
        d_texture = aux.texture_backward(np.float32(alpha) * response.grad)

        geo = None
        if phase is Phase.DUAL:
            if dual_iterations_before(schedule, it) % schedule.lut_refresh == 0 \
                    and (lut is None or lut.built_at_iteration != it):
                lut = build_mask_lut(model, state, segmenter, canonical, lut_config,
                                     iteration=it, enlarge_offsets=enlarge)
                row["lut_rebuilt"] = 1
            geo = total_geometry_loss(model, state, lut, inputs.azimuth, config.weights,
                                      soft_settings, enlarge_offsets=enlarge,
                                      radius=schedule.camera_radius, fov_deg=config.fov_deg)
            row.update(loss_seg=geo.parts["seg"], loss_off=geo.parts["off"],
                       loss_lap=geo.parts["lap"], loss_prior=geo.parts["prior"],
                       loss_geom_total=geo.total)

        # apply updates only after both paths produced their gradients
        adam_step(optim.slot_for("texture", state.texture), state.texture, d_texture,
                  optim.lr_texture, optim.adam)
        if geo is not None:
            grads = {"beta": geo.d_beta, "features": geo.d_features}
            for i in range(4):
                grads[f"mlp_w{i}"] = geo.mlp_grads.weights[i]
                grads[f"mlp_b{i}"] = geo.mlp_grads.biases[i]
            params = geometry_arrays(state)
            for name in GEOMETRY_PARAMS:
                adam_step(optim.slot_for(name, params[name]), params[name], grads[name],
                          optim.lr_geometry, optim.adam)

        for name, arr in state.named_arrays().items():
            if not np.all(np.isfinite(arr)):
                events.append(row)
                if out_dir:
                    write_event_csv(out_dir / "losses.csv", events)
                    save_checkpoint(checkpoint_path("diagnostic"), state, optim, it + 1,
                                    config.seed, config, lut)
                raise NumericsError(f"parameter {name} became non-finite at iteration {it}")

        events.append(row)
        iterations_run += 1
        if out_dir and config.checkpoint_every > 0 and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(checkpoint_path(f"{it + 1:07d}"), state, optim, it + 1,
                            config.seed, config, lut)
        if out_dir and config.preview_every > 0 and (it + 1) % config.preview_every == 0:
            rgb = render_avatar_rgb(model, state, canonical, config, decoder, enlarge)
            fileio.save_png(out_dir / f"preview_{it + 1:07d}.png", rgb)

    return finalize(iterations_run)


def render_avatar_rgb(model: HeadModel, state: AvatarState, pose: ArticulationPose,
                      config: TrainConfig, decoder: LinearDecoder | None = None,
                      enlarge_offsets: np.ndarray | None = None,
                      background: BackgroundSpec | None = None) -> np.ndarray:
    """Full image path: hi render -> downsample -> decode to RGB."""
    from .decode import decode_linear

    decoder = decoder or _build_decoder(config)
    if enlarge_offsets is None and config.enlarge_iterations > 0:
        enlarge_offsets = enlarge_template(model, config.enlarge_strength, config.enlarge_iterations)
    camera = Camera.from_pose(pose, fov_deg=config.fov_deg, resolution=config.hi_resolution)
    f_lo, _ = render_hi_lo(model, state, pose, camera, config.lo_resolution,
                           background=background, enlarge_offsets=enlarge_offsets)
    return decode_linear(decoder, f_lo)
