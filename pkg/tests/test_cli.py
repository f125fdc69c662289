import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from flashsg.cli import main
from flashsg.datagen import synthetic_environment
from flashsg.fileio import read_pfm, write_pfm
from flashsg.geometry import Camera, Primitive, scene_to_text
from flashsg.sg import bank_from_text, bank_to_text, make_bank


@pytest.fixture()
def scene_files(tmp_path):
    prims = [Primitive("sphere", [0, 0, -3.0], scale=[0.8] * 3, material_id=0),
             Primitive("box", [1.0, 0.3, -4.0], [0.9, 0.3, 0.2, 0.1], [0.5] * 3, material_id=2)]
    cam = Camera(32, 32, 50.0, near=1.0, far=6.0)
    (tmp_path / "scene.txt").write_text(scene_to_text(prims, cam, [6.0, 6.0, 6.0]))
    amps = np.random.default_rng(0).uniform(0, 0.3, (24, 3))
    (tmp_path / "bank.txt").write_text(bank_to_text(make_bank(amps)))
    return tmp_path


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert main(["gen", "--count", "1", "--seed", "7", "--out", str(out / "data"), "--resolution", "32"]) == 0
    return out / "data" / "scene_000000"


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


class TestRender:
    def test_writes_both_files(self, scene_files, capsys):
        assert main(["render", str(scene_files / "scene.txt"), str(scene_files / "bank.txt"),
                     str(scene_files / "out" / "img")]) == 0
        assert (scene_files / "out" / "img.pfm").exists() and (scene_files / "out" / "img.png").exists()

    def test_missing_scene_names_path(self, scene_files, capsys):
        missing = str(scene_files / "absent.txt")
        assert main(["render", missing, str(scene_files / "bank.txt"), str(scene_files / "o")]) == 1
        assert missing in capsys.readouterr().err

    def test_parse_error_names_line(self, scene_files, capsys):
        (scene_files / "bad.txt").write_text("sphere 0 0 -3 1 0 0 0 1 1 1 0 1\nsphere 1 2\n")
        assert main(["render", str(scene_files / "bad.txt"), str(scene_files / "bank.txt"),
                     str(scene_files / "o")]) == 1
        assert "bad.txt:2" in capsys.readouterr().err

    def test_mode_additivity(self, scene_files):
        d = scene_files
        for mode in ("full", "flash", "env"):
            assert main(["render", str(d / "scene.txt"), str(d / "bank.txt"), str(d / mode), "--mode", mode]) == 0
        full, flash, env = (read_pfm(d / f"{m}.pfm").astype(np.float64) for m in ("full", "flash", "env"))
        # PFM stores float32, so compare at single precision
        np.testing.assert_allclose(flash + env, full, rtol=1e-6, atol=1e-7)

    def test_thread_count_does_not_change_output(self, scene_files):
        d = scene_files
        main(["render", str(d / "scene.txt"), str(d / "bank.txt"), str(d / "t1")])
        main(["render", str(d / "scene.txt"), str(d / "bank.txt"), str(d / "t3"), "--threads", "3"])
        assert (d / "t1.pfm").read_bytes() == (d / "t3.pfm").read_bytes()

    def test_reference_quadrature(self, scene_files):
        d = scene_files
        assert main(["render", str(d / "scene.txt"), str(d / "bank.txt"), str(d / "ref"), "--mode", "env",
                     "--reference-quadrature", "256", "--resolution", "16"]) == 0
        assert read_pfm(d / "ref.pfm").shape == (16, 16, 3)


class TestGen:
    def test_deterministic(self, tmp_path):
        args = ["gen", "--count", "3", "--seed", "7", "--resolution", "24"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert len(a) == 33 and a == b

    def test_missing_required_flag(self, capsys):
        assert main(["gen", "--count", "1"]) == 1


class TestFitAndMetrics:
    def test_fit_all(self, generated, tmp_path):
        out = tmp_path / "fit"
        assert main(["fit", "--record", str(generated), "--stage", "all", "--out", str(out),
                     "--iterations", "20", "--learning-rate", "1e-2"]) == 0
        for name in ("diffuse.png", "specular.png", "roughness.png", "normal.pfm", "illum_sg.txt", "render.pfm"):
            assert (out / name).exists(), name
        bank = bank_from_text((out / "illum_sg.txt").read_text())
        assert bank.amplitudes.min() >= 0 and bank.amplitudes.max() <= 2

    def test_fit_is_idempotent(self, generated, tmp_path):
        args = ["fit", "--record", str(generated), "--stage", "svbrdf", "--iterations", "5"]
        main(args + ["--out", str(tmp_path / "a")])
        main(args + ["--out", str(tmp_path / "b")])
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_fit_missing_record(self, tmp_path, capsys):
        assert main(["fit", "--record", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 1
        assert "none" in capsys.readouterr().err

    def test_fit_corrupt_record(self, generated, tmp_path, capsys):
        rec = tmp_path / "rec"
        shutil.copytree(generated, rec)
        data = (rec / "depth.pfm").read_bytes()
        (rec / "depth.pfm").write_bytes(data[:40])
        assert main(["fit", "--record", str(rec), "--out", str(tmp_path / "o")]) == 1
        assert "depth.pfm" in capsys.readouterr().err

    def test_metrics_identical_is_zero(self, generated, capsys):
        assert main(["metrics", "--pred", str(generated), "--ref", str(generated)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        report = dict(line.split() for line in lines)
        assert "depth_mse_scale_shift" in report and "sg_l2" in report
        assert all(float(v) == 0.0 for v in report.values())

    def test_metrics_report_file(self, generated, tmp_path, capsys):
        out = tmp_path / "m.txt"
        main(["metrics", "--pred", str(generated), "--ref", str(generated), "--out", str(out)])
        assert out.read_text() == capsys.readouterr().out


class TestGradcheck:
    def test_pass(self, tmp_path, capsys):
        out = tmp_path / "g.txt"
        assert main(["gradcheck", "--stage", "svbrdf", "--samples", "20", "--out", str(out)]) == 0
        assert "passed true" in out.read_text()

    def test_failure_exit_two(self, capsys):
        assert main(["gradcheck", "--stage", "joint", "--samples", "20", "--corrupt", "normals"]) == 2
        assert "passed false" in capsys.readouterr().out

    def test_deterministic(self, capsys):
        main(["gradcheck", "--stage", "illumination", "--samples", "10", "--seed", "3"])
        a = capsys.readouterr().out
        main(["gradcheck", "--stage", "illumination", "--samples", "10", "--seed", "3"])
        assert capsys.readouterr().out == a

    def test_bad_stage_exit_one(self):
        assert main(["gradcheck", "--stage", "shape"]) == 1


class TestSgProject:
    def test_pfm(self, tmp_path):
        write_pfm(tmp_path / "env.pfm", synthetic_environment("studio", 32, 64, seed=1).astype(np.float32))
        assert main(["sg-project", "--env", str(tmp_path / "env.pfm"), "--out", str(tmp_path / "b.txt"),
                     "--samples", "1024"]) == 0
        bank = bank_from_text((tmp_path / "b.txt").read_text())
        assert len(bank) == 24 and bank.amplitudes.max() <= 2

    def test_non_finite_exit_one(self, tmp_path, capsys):
        env = np.ones((8, 16, 3), np.float32)
        env[0, 0, 0] = np.inf
        # the writer refuses non-finite data, so build the file by hand
        header = b"PF\n16 8\n-1.0\n"
        (tmp_path / "bad.pfm").write_bytes(header + env[::-1].astype("<f4").tobytes())
        assert main(["sg-project", "--env", str(tmp_path / "bad.pfm"), "--out", str(tmp_path / "b.txt")]) == 1
        assert "non-finite" in capsys.readouterr().err


class TestConfig:
    def test_config_presets_required_flags(self, tmp_path):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("# presets\ncount 2\nresolution=16\nout " + str(tmp_path / "c") + "\n")
        assert main(["gen", "--config", str(cfg), "--seed", "1"]) == 0
        assert sorted(os.listdir(tmp_path / "c")) == ["scene_000000", "scene_000001"]

    def test_command_line_overrides_config(self, tmp_path):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text(f"count 2\nresolution 16\nout {tmp_path / 'c'}\n")
        assert main(["gen", "--config", str(cfg), "--count", "1"]) == 0
        assert os.listdir(tmp_path / "c") == ["scene_000000"]

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("colour red\n")
        assert main(["gen", "--config", str(cfg)]) == 1
        assert "bad.cfg:1" in capsys.readouterr().err

    def test_bad_threads(self, tmp_path):
        assert main(["gen", "--count", "1", "--out", str(tmp_path), "--threads", "0"]) == 1


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "flashsg.cli", "gradcheck", "--stage", "illumination",
                           "--samples", "5"], capture_output=True, text=True)
    assert proc.returncode == 0 and "passed true" in proc.stdout
    assert shutil.which("flashsg") is not None
