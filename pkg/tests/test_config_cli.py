from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from osmosis.config import build_config, parse_config_file, parse_config_text, serialize_config
from osmosis.cli import main, run_from_manifest
from osmosis.data.io import read_image, write_pfm, write_png16
from osmosis.data.simulate import load_benchmark
from osmosis.errors import ConfigError


class TestConfigParsing:
    def test_defaults_expose_real_world_profile(self):
        cfg = build_config({})
        assert cfg["guidance.scale_rgb"] == (7.0, 7.0, 7.0)
        assert cfg["guidance.scale_depth"] == 0.9
        assert cfg["guidance.lambda_v"] == 20.0
        assert cfg["guidance.clip_value"] == 0.005
        assert cfg["guidance.depth_scale"] == 1.4

    def test_simulation_profile_overlay(self):
        cfg = build_config({"profile": "simulation"})
        assert cfg["guidance.scale_rgb"] == (4.0, 4.0, 4.0)
        assert cfg["guidance.scale_depth"] == 1.0
        assert cfg["guidance.lambda_v"] == 40.0
        assert cfg["guidance.lambda_a"] == 0.0
        assert cfg["guidance.clip_value"] == 0.001
        assert cfg["guidance.depth_scale"] == 0.5
        assert cfg["guidance.tie_phi"] is True
        assert cfg["guidance.weight_scale"] == 1.4
        gcfg = cfg.guidance_config()
        assert gcfg.rec_weight_scaling.scale == 1.4
        np.testing.assert_array_equal(gcfg.phi_init.phi_a, gcfg.phi_init.phi_b)

    def test_file_overrides_profile(self):
        cfg = build_config({"profile": "simulation", "guidance.lambda_v": "12.5"})
        assert cfg["guidance.lambda_v"] == 12.5

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="guidance.lambda_vv"):
            build_config({"guidance.lambda_vv": "1.0"})

    def test_bad_value_names_field(self):
        with pytest.raises(ConfigError, match="schedule.steps"):
            build_config({"schedule.steps": "many"})

    def test_unknown_profile_rejected(self):
        with pytest.raises(ConfigError, match="profile"):
            build_config({"profile": "underwater"})

    def test_comments_and_blanks(self):
        pairs = parse_config_text("# header\n\nseed = 3  # trailing\n")
        assert pairs == {"seed": "3"}

    def test_malformed_line(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config_text("seed 3\n")

    def test_roundtrip_exact(self):
        cfg = build_config(
            {
                "profile": "simulation",
                "schedule.steps": "250",
                "guidance.scale_rgb": "4.5,4.25,4.125",
                "synth.n_objects": "1:9",
                "guidance.phi_lr": "0.00725",
                "train.augment": "false",
            }
        )
        text = serialize_config(cfg)
        again = build_config(parse_config_text(text))
        assert again == cfg
        assert serialize_config(again) == text

    def test_set_overrides_win(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("seed = 1\nschedule.steps = 100\n")
        cfg = parse_config_file(p, {"schedule.steps": "50"})
        assert cfg["schedule.steps"] == 50
        assert cfg["seed"] == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config_file(tmp_path / "absent.cfg")


TINY = [
    "--set", "profile=simulation",
    "--set", "schedule.steps=8",
    "--set", "schedule.beta_start=0.01",
    "--set", "schedule.beta_end=0.2",
    "--set", "model.channels=8",
    "--set", "model.depth_levels=1",
    "--set", "train.size=16",
    "--set", "train.scenes=8",
    "--set", "train.steps=4",
    "--set", "train.batch_size=4",
    "--set", "train.log_every=2",
    "--set", "simulate.count=2",
    "--set", "guidance.snapshot_every=0",
]


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One miniature train+simulate pipeline shared by the CLI tests."""
    root = tmp_path_factory.mktemp("tinyrun")
    assert main(["train", *TINY, "--out", str(root / "train"), "--deterministic"]) == 0
    assert main(["simulate", *TINY, "--out", str(root / "sim"), "--deterministic"]) == 0
    return root


class TestCommands:
    def test_train_outputs(self, tiny_run):
        assert (tiny_run / "train" / "checkpoint.pt").exists()
        metrics = (tiny_run / "train" / "train_metrics.txt").read_text()
        assert metrics.startswith("# step l_simple")
        manifest = json.loads((tiny_run / "train" / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["created"] == 0.0  # deterministic mode zeroes timestamps

    def test_simulate_outputs(self, tiny_run):
        bench = load_benchmark(tiny_run / "sim" / "benchmark")
        assert len(bench.items) == 2

    def test_restore_and_evaluate(self, tiny_run):
        out = tiny_run / "restore"
        code = main(
            [
                "restore",
                *TINY,
                "--set", f"paths.checkpoint={tiny_run / 'train' / 'checkpoint.pt'}",
                "--set", f"paths.input={tiny_run / 'sim' / 'benchmark'}",
                "--out", str(out),
                "--deterministic",
            ]
        )
        assert code == 0
        assert (out / "results" / "0000_restored.png").exists()
        assert (out / "results" / "0000_depth.pfm").exists()
        info = json.loads((out / "results" / "0000_info.json").read_text())
        assert info["mode"] == "guided"
        assert len(info["loss_trace"]) == 8

        eval_out = tiny_run / "eval"
        code = main(
            [
                "evaluate",
                *TINY,
                "--set", f"paths.benchmark={tiny_run / 'sim' / 'benchmark'}",
                "--set", f"paths.results={out / 'results'}",
                "--out", str(eval_out),
                "--deterministic",
            ]
        )
        assert code == 0
        table = (eval_out / "evaluation.txt").read_text()
        assert "mean" in table

    def test_unconditional_label(self, tiny_run):
        out = tiny_run / "restore_uncond"
        code = main(
            [
                "restore",
                *TINY,
                "--set", "guidance.scale_rgb=0,0,0",
                "--set", "guidance.scale_depth=0",
                "--set", f"paths.checkpoint={tiny_run / 'train' / 'checkpoint.pt'}",
                "--set", f"paths.input={tiny_run / 'sim' / 'benchmark'}",
                "--out", str(out),
                "--deterministic",
            ]
        )
        assert code == 0
        info = json.loads((out / "results" / "0000_info.json").read_text())
        assert info["mode"] == "unconditional"

    def test_evaluate_identity_pair_gives_sentinels(self, tiny_run, tmp_path):
        bench = load_benchmark(tiny_run / "sim" / "benchmark")
        results = tmp_path / "results"
        results.mkdir()
        for item in bench.items:
            stem = f"{item.index:04d}"
            write_png16(results / f"{stem}_restored.png", item.clean)
            write_pfm(results / f"{stem}_depth.pfm", item.depth)
        out = tmp_path / "eval"
        code = main(
            [
                "evaluate",
                *TINY,
                "--set", f"paths.benchmark={tiny_run / 'sim' / 'benchmark'}",
                "--set", f"paths.results={results}",
                "--out", str(out),
                "--deterministic",
            ]
        )
        assert code == 0
        txt = (out / "evaluation.txt").read_text()
        assert "inf" in txt
        rows = (out / "evaluation.csv").read_text().splitlines()
        mean_row = rows[-1].split(",")
        assert mean_row[0] == "mean"
        assert float(mean_row[3]) == pytest.approx(1.0)  # ssim column

    def test_exit_codes(self, tmp_path):
        # unknown config key -> 2
        assert main(["train", "--set", "nope=1", "--out", str(tmp_path / "a")]) == 2
        # missing input data -> 3
        code = main(
            [
                "restore",
                *TINY,
                "--set", "paths.checkpoint=/nonexistent/ckpt.pt",
                "--set", "paths.input=/nonexistent/bench",
                "--out", str(tmp_path / "b"),
            ]
        )
        assert code == 3

    def test_jobs_do_not_change_results(self, tiny_run, tmp_path):
        args = [
            "restore",
            *TINY,
            "--set", f"paths.checkpoint={tiny_run / 'train' / 'checkpoint.pt'}",
            "--set", f"paths.input={tiny_run / 'sim' / 'benchmark'}",
            "--deterministic",
        ]
        assert main([*args, "--jobs", "1", "--out", str(tmp_path / "j1")]) == 0
        assert main([*args, "--jobs", "2", "--out", str(tmp_path / "j2")]) == 0
        for name in ("0000_restored.png", "0001_restored.png", "0000_depth.pfm"):
            a = (tmp_path / "j1" / "results" / name).read_bytes()
            b = (tmp_path / "j2" / "results" / name).read_bytes()
            assert a == b, name


class TestManifestRerun:
    def test_rerun_reproduces_bytes(self, tiny_run, tmp_path):
        rerun_dir = tmp_path / "rerun"
        code = run_from_manifest(tiny_run / "sim" / "manifest.json", rerun_dir)
        assert code == 0
        orig = sorted((tiny_run / "sim" / "benchmark").glob("*"))
        new = sorted((rerun_dir / "benchmark").glob("*"))
        assert [p.name for p in orig] == [p.name for p in new]
        for a, b in zip(orig, new):
            assert a.read_bytes() == b.read_bytes(), a.name
