"""Command-line surface.

Subcommands: optimize, render, animate, gradcheck, export-mesh,
make-desk-assets.  Every command echoes its flags into a run-manifest JSON
next to its outputs and is reproducible from flags + seed.

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 guidance/transport
failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .decode import default_decoder, save_decoder_config
from .errors import (
    ConfigError,
    DecodeError,
    GuidanceError,
    HeadOptError,
    ModelFormatError,
    NumericsError,
    ProtocolError,
    SegmentationError,
    ShapeError,
)
from .headmodel import ArticulationPose, enlarge_template, make_desk_model, posed_vertices, save_head_model
from .raster import Camera, render_shaded
from .trainloop import (
    TrainConfig,
    build_model,
    desk_train_config,
    load_checkpoint,
    load_train_config,
    make_desk_pose_dataset,
    render_avatar_rgb,
    run_optimization,
    save_pose_dataset,
    save_train_config,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_TRANSPORT = 4


def _write_manifest(target: Path, command: str, args: argparse.Namespace) -> None:
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {"command": command, "flags": flags}
    if target.is_dir():
        path = target / "manifest.json"
    else:
        path = target.with_suffix(".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, default=str))


def _load_pose_vector(path_or_json: str | None, n: int, joints: int | None = None) -> np.ndarray:
    if path_or_json is None:
        return np.zeros(n if joints is None else (joints, 3), np.float32)
    p = Path(path_or_json)
    text = p.read_text() if p.exists() else path_or_json
    try:
        arr = np.asarray(json.loads(text), np.float32)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"bad pose values {path_or_json!r}: {exc}") from exc
    return arr.reshape(-1, 3) if joints is not None else arr.reshape(-1)


def cmd_make_desk_assets(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = make_desk_model()
    save_head_model(out / "desk_model.hdm", model)
    dataset = make_desk_pose_dataset(model, n=args.poses, seed=args.seed)
    save_pose_dataset(out / "poses.jsonl", dataset)
    save_decoder_config(out / "decoder.json", default_decoder())
    config = desk_train_config(
        model={"kind": "file", "path": str(out / "desk_model.hdm")},
        pose_dataset=str(out / "poses.jsonl"),
        decoder_config=str(out / "decoder.json"),
        seed=args.seed,
    )
    save_train_config(out / "config.json", config)
    _write_manifest(out, "make-desk-assets", args)
    print(f"desk assets written to {out}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    config = load_train_config(args.config) if args.config else desk_train_config()
    if args.prompt is not None:
        config.prompt = args.prompt
    if args.out_dir is not None:
        config.out_dir = args.out_dir
    if args.seed is not None:
        config.seed = args.seed
    if args.guidance is not None:
        config.guidance = args.guidance
    if args.endpoint is not None:
        config.guidance_endpoint = args.endpoint
    if config.out_dir is None:
        raise ConfigError("optimize needs --out-dir (or out_dir in the config)")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "optimize", args)
    result = run_optimization(config, resume=args.resume)
    print(f"optimized {result.iterations_run} iterations; outputs in {out}")
    return EXIT_OK


def _checkpoint_setup(checkpoint_path: str):
    ck = load_checkpoint(checkpoint_path)
    config = TrainConfig.from_dict(ck.config)
    model = build_model(config)
    enlarge = enlarge_template(model, config.enlarge_strength, config.enlarge_iterations) \
        if config.enlarge_iterations > 0 else None
    return ck, config, model, enlarge


def cmd_render(args) -> int:
    ck, config, model, enlarge = _checkpoint_setup(args.checkpoint)
    psi = _load_pose_vector(args.psi_file, model.n_expression)
    phi = _load_pose_vector(args.phi_file, 0, joints=model.n_joints)
    pose = ArticulationPose(psi=psi, phi=phi, azimuth=args.azimuth,
                            elevation=args.elevation, radius=config.schedule.camera_radius)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.textureless:
        posed = posed_vertices(model, ck.state, pose, enlarge_offsets=enlarge)
        camera = Camera.from_pose(pose, fov_deg=config.fov_deg, resolution=config.hi_resolution)
        image = render_shaded(posed.vertices, model.effective_faces(), camera)
    else:
        image = render_avatar_rgb(model, ck.state, pose, config, enlarge_offsets=enlarge)
    fileio.save_png(out, image)
    _write_manifest(out, "render", args)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_animate(args) -> int:
    from .trainloop import load_pose_dataset

    ck, config, model, enlarge = _checkpoint_setup(args.checkpoint)
    dataset = load_pose_dataset(args.pose_dataset)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = min(args.frames, len(dataset.records)) if args.frames else len(dataset.records)
    for i in range(n):
        rec = dataset.records[i]
        pose = ArticulationPose(psi=rec.psi, phi=rec.phi, azimuth=args.azimuth,
                                elevation=0.0, radius=config.schedule.camera_radius)
        rgb = render_avatar_rgb(model, ck.state, pose, config, enlarge_offsets=enlarge)
        fileio.save_png(out / f"frame_{i:06d}.png", rgb)
    _write_manifest(out, "animate", args)
    print(f"wrote {n} frames to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suites

    reports = run_suites([args.suite])
    failed = 0
    for label, report in reports:
        status = "PASS" if report.passed else "FAIL"
        print(f"[{status}] {label}: max rel err {report.max_rel_err:.3e} (tol {report.tol:.1e})")
        failed += 0 if report.passed else 1
    if failed:
        print(f"{failed}/{len(reports)} gradient checks failed")
        return EXIT_NUMERIC
    print(f"all {len(reports)} gradient checks passed")
    return EXIT_OK


def cmd_export_mesh(args) -> int:
    if args.format != "obj":
        raise ConfigError(f"unsupported mesh format {args.format!r}")
    ck, config, model, enlarge = _checkpoint_setup(args.checkpoint)
    psi = _load_pose_vector(args.psi, model.n_expression)
    phi = _load_pose_vector(args.phi, 0, joints=model.n_joints)
    pose = ArticulationPose(psi=psi, phi=phi)
    posed = posed_vertices(model, ck.state, pose, enlarge_offsets=enlarge)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fileio.export_obj(out, posed.vertices, model.effective_faces(), model.uv)
    _write_manifest(out, "export-mesh", args)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="headopt",
        description="Differentiable articulated 3D head avatar optimization engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-desk-assets", help="generate the synthetic desk model, poses and configs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--poses", type=int, default=32, help="pose dataset size")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_desk_assets)

    p = sub.add_parser("optimize", help="run the optimization schedule")
    p.add_argument("--config", help="TrainConfig JSON/TOML file")
    p.add_argument("--prompt")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--guidance", choices=["analytic", "mock", "remote"])
    p.add_argument("--endpoint", help="guidance server URL for --guidance remote")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("render", help="render a still from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--psi-file", help="JSON file (or inline JSON) with expression coefficients")
    p.add_argument("--phi-file", help="JSON file (or inline JSON) with per-joint axis-angles")
    p.add_argument("--textureless", action="store_true", help="write the shaded geometry render")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("animate", help="render one frame per pose record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pose-dataset", required=True)
    p.add_argument("--frames", type=int, default=0, help="0 = all records")
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("gradcheck", help="run finite-difference gradient suites")
    p.add_argument("--suite", choices=["mlp", "raster", "seg", "geom", "all"], default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-mesh", help="export the posed mesh as OBJ")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--psi", help="inline JSON or file with expression coefficients")
    p.add_argument("--phi", help="inline JSON or file with per-joint axis-angles")
    p.add_argument("--format", default="obj")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_mesh)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GuidanceError, DecodeError, ProtocolError) as exc:
        print(f"guidance/transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (NumericsError, ShapeError, ModelFormatError, SegmentationError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except HeadOptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
