import csv
import json
import logging
import math

import numpy as np
import pytest

from faor.cli import main
from faor.geometry import ErpGrid, distortion_map
from faor.io import (
    RunManifest,
    load_float32,
    load_image,
    load_instance_map,
    save_image,
    save_instance_map,
    write_config,
)
from faor.model import FAOR, ModelConfig


def write_png(path, h, w, seed=0):
    img = np.random.default_rng(seed).integers(0, 256, (h, w, 3)) / 255.0
    save_image(img, path)
    return img


@pytest.fixture
def checkpoint(tmp_path):
    m = FAOR(ModelConfig(num_blocks=1, channels=4, mlp_hidden=8), seed=0)
    rng = np.random.default_rng(1)
    for p in m.parameters():
        p.data = (p.data + rng.normal(0, 0.1, p.shape)).astype(p.dtype)
    m.save(tmp_path / "m.faor")
    return tmp_path / "m.faor"


def luma(img):
    q = np.floor(np.clip(img, 0, 1) * 255 + 0.5)
    return 16 + (65.481 * q[..., 0] + 128.553 * q[..., 1] + 24.966 * q[..., 2]) / 255


def loop_ws_psnr(a, b):
    h, w = a.shape
    num = den = 0.0
    for i in range(h):
        wi = math.cos((i + 0.5 - h / 2) / h * math.pi)
        for j in range(w):
            num += wi * (a[i, j] - b[i, j]) ** 2
            den += wi
    return 10 * math.log10(255.0 ** 2 / (num / den))


class TestGenPriors:
    def test_h2(self, tmp_path, caplog):
        write_png(tmp_path / "in.png", 2, 4)
        with caplog.at_level(logging.WARNING, logger="faor"):
            assert main(["gen-priors", "--input", str(tmp_path / "in.png"), "--out-dir", str(tmp_path / "p")]) == 0
        assert "segmentation" in caplog.text
        np.testing.assert_array_equal(load_instance_map(tmp_path / "p/m_d.png"), np.full((2, 4), 180))
        assert not load_instance_map(tmp_path / "p/m_s.png").any()
        assert RunManifest.read(tmp_path / "p/manifest.json").command == "gen-priors"

    def test_sidecar_matches_recompute(self, tmp_path):
        write_png(tmp_path / "in.png", 6, 12)
        main(["gen-priors", "--input", str(tmp_path / "in.png"), "--out-dir", str(tmp_path)])
        side = load_float32(tmp_path / "m_d.f32", (6, 12))
        expected = np.array([[255 * math.cos((h + 0.5 - 3) / 6 * math.pi)] * 12 for h in range(6)])
        np.testing.assert_array_equal(side, expected.astype(np.float32))
        np.testing.assert_array_equal(side, distortion_map(ErpGrid(6, 12)).values.astype(np.float32))

    def test_segmentation_copied(self, tmp_path):
        write_png(tmp_path / "in.png", 4, 8)
        ids = np.arange(32).reshape(4, 8) * 1000
        save_instance_map(ids, tmp_path / "seg.png")
        assert main(["gen-priors", "--input", str(tmp_path / "in.png"), "--out-dir", str(tmp_path / "p"),
                     "--segmentation", str(tmp_path / "seg.png")]) == 0
        np.testing.assert_array_equal(load_instance_map(tmp_path / "p/m_s.png"), ids)

    def test_segmentation_shape_mismatch(self, tmp_path):
        write_png(tmp_path / "in.png", 4, 8)
        save_instance_map(np.zeros((4, 7), dtype=int), tmp_path / "seg.png")
        assert main(["gen-priors", "--input", str(tmp_path / "in.png"), "--out-dir", str(tmp_path / "p"),
                     "--segmentation", str(tmp_path / "seg.png")]) == 2


class TestUpscale:
    def test_bicubic_baseline(self, tmp_path):
        write_png(tmp_path / "in.png", 8, 16)
        assert main(["upscale", "--input", str(tmp_path / "in.png"), "--scale", "2",
                     "--resampler", "bicubic", "--out", str(tmp_path / "out.png")]) == 0
        assert load_image(tmp_path / "out.png").shape == (16, 32, 3)
        man = RunManifest.read(tmp_path / "out.png.manifest.json")
        assert man.extra["mode"] == "resampler:bicubic"
        assert man.extra["sgif_evaluations"] == 0

    def test_model_counts(self, tmp_path, checkpoint):
        write_png(tmp_path / "in.png", 8, 16)
        assert main(["upscale", "--input", str(tmp_path / "in.png"), "--scale", "2.5",
                     "--checkpoint", str(checkpoint), "--out", str(tmp_path / "out.png")]) == 0
        assert load_image(tmp_path / "out.png").shape == (20, 40, 3)
        man = RunManifest.read(tmp_path / "out.png.manifest.json")
        assert man.extra["sgif_evaluations"] == 20 * 40
        assert man.extra["output_shape"] == [20, 40]
        assert set(man.timings_ms) == {"encode_ms", "resample_ms", "sgif_ms"}
        assert all(v >= 0 for v in man.timings_ms.values())

    def test_fractional_shape(self, tmp_path):
        write_png(tmp_path / "in.png", 10, 20)
        main(["upscale", "--input", str(tmp_path / "in.png"), "--scale", "1.25", "--out", str(tmp_path / "o.png")])
        assert load_image(tmp_path / "o.png").shape == (13, 25, 3)  # 12.5 rounds away from zero

    def test_reproducible(self, tmp_path, checkpoint):
        write_png(tmp_path / "in.png", 6, 12)
        for name in ("a.png", "b.png"):
            main(["upscale", "--input", str(tmp_path / "in.png"), "--scale", "2",
                  "--checkpoint", str(checkpoint), "--out", str(tmp_path / name)])
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_missing_input(self, tmp_path):
        assert main(["upscale", "--input", str(tmp_path / "no.png"), "--scale", "2",
                     "--out", str(tmp_path / "o.png")]) == 2

    def test_bad_scale(self, tmp_path):
        write_png(tmp_path / "in.png", 4, 8)
        assert main(["upscale", "--input", str(tmp_path / "in.png"), "--scale", "-1",
                     "--out", str(tmp_path / "o.png")]) == 2

    def test_corrupt_input(self, tmp_path):
        (tmp_path / "in.png").write_bytes(b"\x89PNG\r\n\x1a\nbroken")
        assert main(["upscale", "--input", str(tmp_path / "in.png"), "--scale", "2",
                     "--out", str(tmp_path / "o.png")]) == 2

    def test_numeric_failure(self, tmp_path):
        m = FAOR(ModelConfig(num_blocks=1, channels=4, mlp_hidden=8), seed=0)
        m.params["lift.w"].data[:] = np.nan
        m.save(tmp_path / "nan.faor")
        write_png(tmp_path / "in.png", 4, 8)
        assert main(["upscale", "--input", str(tmp_path / "in.png"), "--scale", "2",
                     "--checkpoint", str(tmp_path / "nan.faor"), "--out", str(tmp_path / "o.png")]) == 3


class TestEval:
    def test_identical_pairs(self, tmp_path, capsys):
        for name in ("one", "two"):
            img = write_png(tmp_path / f"{name}_hr.png", 16, 32, seed=len(name))
            save_image(img, tmp_path / f"{name}_sr.png")
        assert main(["eval", "--pairs", str(tmp_path), "--out", str(tmp_path / "res")]) == 0
        rows = list(csv.DictReader(open(tmp_path / "res/metrics.csv")))
        assert [r["image"] for r in rows] == ["one", "two", "mean"]
        assert all(float(r["ws_psnr"]) == 99.0 and float(r["ws_ssim"]) == 1.0 for r in rows)
        assert "99.000" in capsys.readouterr().out

    def test_fixture_oracle(self, tmp_path):
        hr = write_png(tmp_path / "fx_hr.png", 16, 32, seed=3)
        sr = write_png(tmp_path / "fx_sr.png", 16, 32, seed=4)
        main(["eval", "--pairs", str(tmp_path), "--out", str(tmp_path / "res")])
        rows = list(csv.DictReader(open(tmp_path / "res/metrics.csv")))
        assert abs(float(rows[0]["ws_psnr"]) - loop_ws_psnr(luma(sr), luma(hr))) < 1e-6

    def test_hr_dir_bicubic(self, tmp_path):
        (tmp_path / "hr").mkdir()
        write_png(tmp_path / "hr/a.png", 16, 32)
        assert main(["eval", "--hr-dir", str(tmp_path / "hr"), "--scale", "2", "--out", str(tmp_path / "r")]) == 0
        mean = json.loads((tmp_path / "r/manifest.json").read_text())["extra"]["mean"]
        assert 0 < mean["ws_psnr"] < 99

    def test_hr_dir_shape_mismatch(self, tmp_path):
        (tmp_path / "hr").mkdir()
        write_png(tmp_path / "hr/a.png", 10, 20)
        assert main(["eval", "--hr-dir", str(tmp_path / "hr"), "--scale", "3"]) == 2

    def test_unmatched_pair(self, tmp_path):
        write_png(tmp_path / "x_sr.png", 12, 12)
        assert main(["eval", "--pairs", str(tmp_path)]) == 2

    def test_needs_source(self):
        assert main(["eval"]) == 2


class TestBench:
    def test_repeat_five(self, tmp_path, checkpoint, capsys):
        write_png(tmp_path / "in.png", 4, 8)
        assert main(["bench", "--input", str(tmp_path / "in.png"), "--scale", "2", "--repeat", "5",
                     "--checkpoint", str(checkpoint), "--out", str(tmp_path / "b.json")]) == 0
        out = capsys.readouterr().out
        assert "throughput" in out and "median" in out
        man = RunManifest.read(tmp_path / "b.json")
        assert len(man.extra["samples"]) == 5
        totals = [s["total_ms"] for s in man.extra["samples"]]
        assert man.timings_ms["total_ms"] == pytest.approx(float(np.median(totals)))

    def test_bad_repeat(self, tmp_path):
        write_png(tmp_path / "in.png", 4, 8)
        assert main(["bench", "--input", str(tmp_path / "in.png"), "--scale", "2", "--repeat", "0"]) == 2


class TestTrainAndSynth:
    def test_synth_then_train(self, tmp_path, monkeypatch):
        assert main(["synth", "--out-dir", str(tmp_path / "d"), "--count", "2",
                     "--height", "32", "--width", "64"]) == 0
        assert (tmp_path / "d/synth001_seg.png").exists()
        write_config({"num_blocks": 1, "channels": 4, "mlp_hidden": 8, "base_patch": 8,
                      "pixels_per_patch": 32, "max_iters": 3, "r_max": 2.0, "seed": 5}, tmp_path / "c.cfg")
        monkeypatch.setenv("FAOR_SEED", "11")
        args = ["train", "--config", str(tmp_path / "c.cfg"), "--data-dir", str(tmp_path / "d")]
        assert main(args + ["--out", str(tmp_path / "run1")]) == 0
        assert main(args + ["--out", str(tmp_path / "run2")]) == 0
        man = RunManifest.read(tmp_path / "run1/manifest.json")
        assert man.seed == 11 and man.extra["iterations"] == 3
        loss1 = (tmp_path / "run1/loss.csv").read_text()
        assert loss1.splitlines()[0] == "iteration,lr,loss" and len(loss1.splitlines()) == 4
        assert loss1 == (tmp_path / "run2/loss.csv").read_text()
        assert FAOR.load(tmp_path / "run1/model.faor").config.num_blocks == 1

    def test_bad_seed_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FAOR_SEED", "abc")
        assert main(["synth", "--out-dir", str(tmp_path), "--count", "1", "--height", "8", "--width", "16"]) == 2

    def test_bad_config(self, tmp_path):
        (tmp_path / "c.cfg").write_text("wings = 2\n")
        (tmp_path / "d").mkdir()
        assert main(["train", "--config", str(tmp_path / "c.cfg"), "--data-dir", str(tmp_path / "d"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_empty_data_dir(self, tmp_path):
        (tmp_path / "d").mkdir()
        assert main(["train", "--data-dir", str(tmp_path / "d"), "--out", str(tmp_path / "o")]) == 2
