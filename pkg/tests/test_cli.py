import csv
import hashlib
import json

import numpy as np
import pytest

from nsn2n.cli import EXIT_FAILED, EXIT_INVALID, EXIT_OK, main, read_config_file, resolve_config
from nsn2n.filters import LpfParams
from nsn2n.model import ModelConfig
from nsn2n.train import HISTORY_COLUMNS, TrainConfig
from nsn2n.volume import Volume, load_volume, payload_path, save_volume


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


SMALL_MODEL = ["--unet-levels", "2", "--base-channels", "4"]


@pytest.fixture
def volumes(tmp_path):
    clean = tmp_path / "clean.json"
    noisy = tmp_path / "noisy.json"
    assert main(["synth", "--out", str(clean), "--width", "16", "--height", "16", "--depth", "4"]) == 0
    assert main(["corrupt", "--in", str(clean), "--out", str(noisy), "--level", "0.05", "--seed", "1"]) == 0
    return clean, noisy


class TestSynthCorrupt:
    def test_default_phantom(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "v.json")]) == EXIT_OK
        assert load_volume(tmp_path / "v.json").shape == (32, 64, 64)
        assert "overlap" in capsys.readouterr().out

    def test_depth_one_rejected(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "v.json"), "--depth", "1"]) == EXIT_INVALID
        assert not (tmp_path / "v.json").exists()

    def test_same_seed_same_file(self, tmp_path):
        for name in ("a", "b"):
            main(["synth", "--out", str(tmp_path / f"{name}.json"), "--seed", "3", "--depth", "4"])
        assert digest(tmp_path / "a.raw") == digest(tmp_path / "b.raw")

    def test_rician_seven_percent(self, volumes, tmp_path):
        clean, _ = volumes
        out = tmp_path / "r.json"
        assert main(["corrupt", "--in", str(clean), "--out", str(out), "--model", "rician", "--level", "0.07"]) == 0
        assert load_volume(out).data.min() >= 0

    def test_level_zero_copies_payload(self, volumes, tmp_path):
        clean, _ = volumes
        out = tmp_path / "same.json"
        assert main(["corrupt", "--in", str(clean), "--out", str(out), "--level", "0"]) == 0
        assert payload_path(out).read_bytes() == payload_path(clean).read_bytes()

    def test_missing_input(self, tmp_path):
        assert main(["corrupt", "--in", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o.json")]) == EXIT_INVALID

    def test_unknown_noise_model(self, volumes, tmp_path):
        clean, _ = volumes
        assert main(["corrupt", "--in", str(clean), "--out", str(tmp_path / "o.json"), "--model", "poisson"]) == EXIT_INVALID


class TestPairs:
    def test_threshold_written(self, volumes, tmp_path):
        _, noisy = volumes
        assert main(["pairs", "--in", str(noisy), "--out", str(tmp_path / "p"), "--th", "0.01"]) == 0
        manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
        assert manifest["th"] == 0.01 and len(manifest["pairs"]) == 3
        assert manifest["lpf"]["h"] == 0.03

    def test_negative_threshold(self, volumes, tmp_path):
        _, noisy = volumes
        assert main(["pairs", "--in", str(noisy), "--out", str(tmp_path / "p"), "--th", "-1"]) == EXIT_INVALID

    def test_sweep_table(self, volumes, tmp_path, capsys):
        _, noisy = volumes
        out = tmp_path / "diag"
        assert main(["pairs", "--in", str(noisy), "--out", str(out), "--sweep", "0.005,0.01,0.02"]) == 0
        text = capsys.readouterr().out
        assert "matched" in text and len(text.strip().splitlines()) == 4
        rows = json.loads((out / "diagnostics.json").read_text())
        assert [r["th"] for r in rows] == [0.005, 0.01, 0.02]
        assert not (out / "manifest.json").exists()

    def test_noise_level_derives_filter(self, volumes, tmp_path):
        _, noisy = volumes
        assert main(["pairs", "--in", str(noisy), "--out", str(tmp_path / "p"), "--noise-level", "0.07"]) == 0
        manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
        assert manifest["th"] == 0.03
        assert manifest["lpf"]["sigma"] == 0.07


class TestTrainDenoiseEval:
    def test_round_trip(self, volumes, tmp_path, capsys):
        clean, noisy = volumes
        run = tmp_path / "run"
        args = ["train", "--in", str(noisy), "--clean", str(clean), "--out", str(run), "--epochs", "2", *SMALL_MODEL]
        assert main(args) == 0
        assert (run / "model.json").exists() and (run / "history.csv").exists()
        with open(run / "history.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 and rows[0]["psnr"] != ""
        den = tmp_path / "den.json"
        assert main(["denoise", "--model", str(run / "model.json"), "--in", str(noisy), "--out", str(den)]) == 0
        out = load_volume(den)
        assert out.shape == load_volume(noisy).shape
        assert out.data.min() >= 0 and out.data.max() <= 1
        capsys.readouterr()
        assert main(["eval", "--pred", str(den), "--truth", str(clean), "--out", str(tmp_path / "m.json")]) == 0
        assert capsys.readouterr().out.startswith("PSNR ")

    def test_ablation_recorded(self, volumes, tmp_path):
        _, noisy = volumes
        run = tmp_path / "run"
        assert main(["train", "--in", str(noisy), "--out", str(run), "--epochs", "1", "--ablate", "no-ic", *SMALL_MODEL]) == 0
        cfg = json.loads((run / "config.json").read_text())["train"]
        assert cfg["use_ic"] is False and cfg["use_rc"] is True

    def test_prebuilt_pairs(self, volumes, tmp_path):
        _, noisy = volumes
        assert main(["pairs", "--in", str(noisy), "--out", str(tmp_path / "p"), "--th", "0.02"]) == 0
        run = tmp_path / "run"
        assert main(["train", "--in", str(noisy), "--pairs", str(tmp_path / "p"), "--out", str(run),
                     "--epochs", "1", *SMALL_MODEL]) == 0
        assert json.loads((run / "config.json").read_text())["train"]["th"] == 0.02

    def test_deterministic_reruns(self, volumes, tmp_path):
        _, noisy = volumes
        for name in ("a", "b"):
            assert main(["train", "--in", str(noisy), "--out", str(tmp_path / name), "--epochs", "2",
                         "--deterministic", *SMALL_MODEL]) == 0
        for f in ("model.json", "model.json.bin", "history.csv"):
            assert digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f)

    def test_eval_identical(self, volumes, tmp_path, capsys):
        clean, _ = volumes
        assert main(["eval", "--pred", str(clean), "--truth", str(clean), "--out", str(tmp_path / "m.json")]) == 0
        assert "inf" in capsys.readouterr().out
        d = json.loads((tmp_path / "m.json").read_text())
        assert d["psnr_mean"] == "inf" and d["ssim_mean_percent"] == 100.0

    def test_eval_shape_mismatch(self, volumes, tmp_path):
        clean, _ = volumes
        other = tmp_path / "other.json"
        save_volume(Volume(np.zeros((3, 16, 16))), other)
        assert main(["eval", "--pred", str(other), "--truth", str(clean)]) == EXIT_INVALID

    def test_divergence_exit_code(self, volumes, tmp_path):
        _, noisy = volumes
        with np.errstate(all="ignore"):
            code = main(["train", "--in", str(noisy), "--out", str(tmp_path / "r"), "--epochs", "2",
                         "--lr", "1e30", *SMALL_MODEL])
        assert code == EXIT_FAILED

    def test_corrupt_checkpoint_exit_code(self, volumes, tmp_path):
        _, noisy = volumes
        run = tmp_path / "run"
        main(["train", "--in", str(noisy), "--out", str(run), "--epochs", "1", *SMALL_MODEL])
        raw = run / "model.json.bin"
        raw.write_bytes(raw.read_bytes()[:100])
        assert main(["denoise", "--model", str(run / "model.json"), "--in", str(noisy),
                     "--out", str(tmp_path / "d.json")]) == EXIT_FAILED

    def test_corrupt_volume_exit_code(self, volumes, tmp_path):
        clean, _ = volumes
        payload_path(clean).write_bytes(b"\0" * 12)
        assert main(["corrupt", "--in", str(clean), "--out", str(tmp_path / "o.json")]) == EXIT_FAILED


class TestReport:
    def test_hundred_epochs(self, tmp_path):
        path = tmp_path / "history.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for e in range(1, 101):
                w.writerow([e, 1e-3, 0.1, 0.05, 0.02, 0.01, 20 + e / 10, 0.0])
        out = tmp_path / "report.csv"
        assert main(["report", "--history", f"full={path}", "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 100
        assert float(rows[-1]["full_psnr"]) == 30.0

    def test_duplicate_labels(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text(",".join(HISTORY_COLUMNS) + "\n")
        assert main(["report", "--history", str(path), str(path), "--out", str(tmp_path / "r.csv")]) == EXIT_INVALID


class TestConfig:
    """Flag > config file > built-in default, field by field."""

    @pytest.mark.parametrize(
        "section,key,flag_value,file_value,default",
        [
            ("train", "epochs", 7, 5, 100),
            ("train", "lambda_ic", 0.0, 2.0, 1.0),
            ("phantom", "depth", 9, 6, 32),
            ("noise", "seed", 4, 2, 0),
            ("model", "base_channels", 8, 12, 16),
            ("lpf", "search_radius", 2, 4, 3),
        ],
    )
    @pytest.mark.parametrize("in_file", [False, True])
    @pytest.mark.parametrize("on_cli", [False, True])
    def test_precedence_matrix(self, section, key, flag_value, file_value, default, in_file, on_cli):
        file_config = {section: {key: file_value}} if in_file else {}
        overrides = {section: {key: flag_value}} if on_cli else {}
        cfg = resolve_config(file_config, overrides)
        expected = flag_value if on_cli else file_value if in_file else default
        assert getattr(getattr(cfg, section), key) == expected

    def test_defaults_are_reference_settings(self):
        cfg = resolve_config({}, {})
        assert cfg.train == TrainConfig()
        assert (cfg.train.lambda_rc, cfg.train.lambda_ic, cfg.train.epochs, cfg.train.base_lr) == (0.5, 1.0, 100, 1e-3)
        assert cfg.model == ModelConfig()
        assert cfg.lpf == LpfParams()

    def test_noise_level_fills_filter_and_threshold(self):
        cfg = resolve_config({"noise": {"level": 0.07}}, {})
        assert cfg.train.th == 0.03
        assert cfg.lpf == LpfParams.for_noise_level(0.07)
        explicit = resolve_config({"noise": {"level": 0.07}, "train": {"th": 0.02}, "lpf": {"h": 0.05}}, {})
        assert explicit.train.th == 0.02 and explicit.lpf.h == 0.05

    def test_precedence_through_main(self, tmp_path):
        cfg = tmp_path / "exp.json"
        cfg.write_text(json.dumps({"phantom": {"depth": 5, "width": 16, "height": 16}}))
        main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a.json")])
        main(["synth", "--config", str(cfg), "--depth", "3", "--out", str(tmp_path / "b.json")])
        assert load_volume(tmp_path / "a.json").depth == 5
        assert load_volume(tmp_path / "b.json").depth == 3

    @pytest.mark.parametrize(
        "content",
        ['{"train": {"epochz": 3}}', '{"extra": {}}', "not json", '{"train": {"epochs": 0}}', '{"model": {"levels": 0}}'],
    )
    def test_bad_config_rejected_before_work(self, tmp_path, content):
        cfg = tmp_path / "exp.json"
        cfg.write_text(content)
        out = tmp_path / "v.json"
        assert main(["synth", "--config", str(cfg), "--out", str(out)]) == EXIT_INVALID
        assert not out.exists()

    def test_missing_config(self, tmp_path):
        with pytest.raises(ValueError):
            read_config_file(tmp_path / "missing.json")

    def test_bad_threads(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "v.json"), "--threads", "0"]) == EXIT_INVALID


class TestPipeline:
    CONFIG = {
        "phantom": {"width": 16, "height": 16, "depth": 4},
        "noise": {"level": 0.07, "seed": 1},
        "train": {"epochs": 2, "checkpoint_every": 1},
        "model": {"levels": 2, "base_channels": 4},
    }

    def test_outputs_and_determinism(self, tmp_path):
        cfg = tmp_path / "exp.json"
        cfg.write_text(json.dumps(self.CONFIG))
        for name in ("a", "b"):
            assert main(["pipeline", "--config", str(cfg), "--workdir", str(tmp_path / name), "--deterministic"]) == 0
        a, b = tmp_path / "a", tmp_path / "b"
        for f in ("clean.json", "noisy.json", "denoised.json", "metrics_denoised.json", "report.csv"):
            assert (a / f).exists()
        for f in ("train/model.json", "train/model.json.bin", "train/history.csv",
                  "train/checkpoints/checkpoint_epoch001.json.bin", "denoised.raw"):
            assert digest(a / f) == digest(b / f), f
        resolved = json.loads((a / "config.json").read_text())
        assert resolved["train"]["th"] == 0.03 and resolved["lpf"]["sigma"] == 0.07

    def test_cli_overrides_config(self, tmp_path):
        cfg = tmp_path / "exp.json"
        cfg.write_text(json.dumps(self.CONFIG))
        assert main(["pipeline", "--config", str(cfg), "--workdir", str(tmp_path / "w"), "--epochs", "1",
                     "--ablate", "no-rc"]) == 0
        with open(tmp_path / "w" / "train" / "history.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 1
        assert json.loads((tmp_path / "w" / "config.json").read_text())["train"]["use_rc"] is False
