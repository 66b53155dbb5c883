import json

import numpy as np
import pytest

from headopt.cli import main
from headopt.fileio import load_png
from headopt.trainloop import Schedule, desk_train_config, load_train_config, save_train_config


@pytest.fixture(scope="module")
def desk_assets(tmp_path_factory):
    out = tmp_path_factory.mktemp("assets")
    assert main(["make-desk-assets", "--out-dir", str(out), "--poses", "6", "--seed", "1"]) == 0
    return out


@pytest.fixture(scope="module")
def tiny_run(desk_assets, tmp_path_factory):
    """A short optimization producing a checkpoint for render/animate tests."""
    run_dir = tmp_path_factory.mktemp("run")
    cfg = load_train_config(desk_assets / "config.json")
    cfg.schedule = Schedule(total_iters=8, initial_texture_iters=2, dual_block=4,
                            texture_block=2, lut_refresh=2, azimuth_min=-2, azimuth_max=2)
    cfg.texture_resolution = 16
    cfg.hi_resolution = 16
    cfg.lo_resolution = 8
    cfg.soft_resolution = 8
    cfg.sigma = 2e-3
    cfg.checkpoint_every = 0
    cfg.preview_every = 4
    cfg_path = desk_assets / "tiny_config.json"
    save_train_config(cfg_path, cfg)
    code = main(["optimize", "--config", str(cfg_path), "--out-dir", str(run_dir),
                 "--guidance", "mock", "--seed", "3"])
    assert code == 0
    return run_dir


class TestMakeDeskAssets:
    def test_outputs_exist(self, desk_assets):
        for name in ("desk_model.hdm", "poses.jsonl", "decoder.json", "config.json", "manifest.json"):
            assert (desk_assets / name).exists(), name

    def test_manifest_echoes_flags(self, desk_assets):
        manifest = json.loads((desk_assets / "manifest.json").read_text())
        assert manifest["command"] == "make-desk-assets"
        assert manifest["flags"]["poses"] == 6

    def test_config_loads(self, desk_assets):
        cfg = load_train_config(desk_assets / "config.json")
        assert cfg.model["kind"] == "file"


class TestOptimize:
    def test_outputs(self, tiny_run):
        assert (tiny_run / "checkpoint_final.ckpt").exists()
        assert (tiny_run / "losses.csv").exists()
        assert (tiny_run / "manifest.json").exists()
        assert (tiny_run / "preview_0000004.png").exists()
        assert (tiny_run / "preview_0000008.png").exists()

    def test_missing_config_is_config_error(self, tmp_path):
        code = main(["optimize", "--config", str(tmp_path / "none.json"), "--out-dir", str(tmp_path)])
        assert code == 2

    def test_missing_out_dir_is_config_error(self, desk_assets):
        assert main(["optimize", "--config", str(desk_assets / "tiny_config.json")]) == 2

    def test_remote_without_endpoint(self, desk_assets, tmp_path):
        code = main(["optimize", "--config", str(desk_assets / "tiny_config.json"),
                     "--out-dir", str(tmp_path), "--guidance", "remote"])
        assert code == 2

    def test_unreachable_endpoint_is_transport_error(self, desk_assets, tmp_path):
        cfg = load_train_config(desk_assets / "tiny_config.json")
        cfg.guidance_timeout = 0.2
        cfg.guidance_retries = 0
        p = tmp_path / "cfg.json"
        save_train_config(p, cfg)
        code = main(["optimize", "--config", str(p), "--out-dir", str(tmp_path / "o"),
                     "--guidance", "remote", "--endpoint", "http://127.0.0.1:9"])
        # guidance failures skip steps rather than failing the run
        assert code == 0

    def test_resume_flag(self, tiny_run, desk_assets, tmp_path):
        ck = tiny_run / "checkpoint_final.ckpt"
        code = main(["optimize", "--config", str(desk_assets / "tiny_config.json"),
                     "--out-dir", str(tmp_path), "--guidance", "mock", "--seed", "3",
                     "--resume", str(ck)])
        assert code == 0


class TestRender:
    def test_render_png(self, tiny_run, tmp_path):
        out = tmp_path / "still.png"
        code = main(["render", "--checkpoint", str(tiny_run / "checkpoint_final.ckpt"),
                     "--azimuth", "5", "--out", str(out)])
        assert code == 0
        img = load_png(out)
        assert img.shape == (3, 64, 64)  # lo 8 * 8x decode
        assert (tmp_path / "still.manifest.json").exists()

    def test_render_byte_identical(self, tiny_run, tmp_path):
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        args = ["render", "--checkpoint", str(tiny_run / "checkpoint_final.ckpt"), "--out"]
        assert main(args + [str(a)]) == 0
        assert main(args + [str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_textureless(self, tiny_run, tmp_path):
        out = tmp_path / "geo.png"
        code = main(["render", "--checkpoint", str(tiny_run / "checkpoint_final.ckpt"),
                     "--textureless", "--out", str(out)])
        assert code == 0
        img = load_png(out)
        assert img.shape == (3, 16, 16)

    def test_inline_pose_values(self, tiny_run, tmp_path):
        out = tmp_path / "posed.png"
        code = main(["render", "--checkpoint", str(tiny_run / "checkpoint_final.ckpt"),
                     "--psi-file", "[0.5, 0.0, 0.0, 0.0]",
                     "--phi-file", "[[0,0,0],[0.2,0,0]]", "--out", str(out)])
        assert code == 0


class TestAnimate:
    def test_frames_written(self, tiny_run, desk_assets, tmp_path):
        out = tmp_path / "frames"
        code = main(["animate", "--checkpoint", str(tiny_run / "checkpoint_final.ckpt"),
                     "--pose-dataset", str(desk_assets / "poses.jsonl"),
                     "--frames", "3", "--out-dir", str(out)])
        assert code == 0
        names = sorted(p.name for p in out.glob("frame_*.png"))
        assert names == ["frame_000000.png", "frame_000001.png", "frame_000002.png"]

    def test_frames_differ_across_poses(self, tiny_run, desk_assets, tmp_path):
        out = tmp_path / "frames"
        main(["animate", "--checkpoint", str(tiny_run / "checkpoint_final.ckpt"),
              "--pose-dataset", str(desk_assets / "poses.jsonl"),
              "--frames", "2", "--out-dir", str(out)])
        a = load_png(out / "frame_000000.png")
        b = load_png(out / "frame_000001.png")
        assert not np.array_equal(a, b)


class TestGradcheckCommand:
    def test_mlp_suite_passes(self, capsys):
        assert main(["gradcheck", "--suite", "mlp"]) == 0
        out = capsys.readouterr().out
        assert "[PASS]" in out and "FAIL" not in out


class TestExportMesh:
    def test_obj_written(self, tiny_run, tmp_path):
        out = tmp_path / "head.obj"
        code = main(["export-mesh", "--checkpoint", str(tiny_run / "checkpoint_final.ckpt"),
                     "--out", str(out)])
        assert code == 0
        text = out.read_text()
        assert text.count("v ") >= 42
        assert "vt " in text and "f " in text

    def test_bad_format(self, tiny_run, tmp_path):
        code = main(["export-mesh", "--checkpoint", str(tiny_run / "checkpoint_final.ckpt"),
                     "--format", "ply", "--out", str(tmp_path / "x.ply")])
        assert code == 2


def test_desk_config_roundtrip(tmp_path):
    cfg = desk_train_config(prompt="hello")
    p = tmp_path / "c.json"
    save_train_config(p, cfg)
    assert load_train_config(p).prompt == "hello"
