import csv
import json

import numpy as np
import pytest

from rhythmhead import geometry
from rhythmhead.cli import main

CFG = {"tau": 16, "n_frames": 32, "K": 4, "image_size": 32, "sample_rate": 5000, "motion_epochs": 2, "expression_epochs": 1, "generator_steps": 2}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(CFG))
    cfg = str(d / "cfg.json")
    assert main(["synth-data", "--config", cfg, "--out", str(d / "scene"), "--subject", "1"]) == 0
    for cmd in ("train-motion", "train-expression", "train-generator"):
        assert main([cmd, "--config", cfg, "--data", str(d / "scene"), "--out", str(d / "models")]) == 0
    return d


def test_no_arguments_prints_usage(capsys):
    assert main([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    assert main(["--bogus"]) == 1
    assert main(["generate", "--data", "x"]) == 1
    assert main(["nope"]) == 1
    assert "error" in capsys.readouterr().err


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for cmd in ("synth-data", "train-motion", "train-expression", "train-generator", "generate", "eval", "gradcheck", "export-motion-csv", "disentangle"):
        assert cmd in out


def test_runtime_failure_exits_2(tmp_path, capsys):
    assert main(["disentangle", "--landmarks", str(tmp_path / "missing.json"), "--out", str(tmp_path / "m.csv")]) == 2
    assert "FileNotFoundError" in capsys.readouterr().err
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"tau": 2, "K": 8}))
    assert main(["synth-data", "--config", str(bad), "--out", str(tmp_path / "s")]) == 2


def test_training_outputs(workspace):
    models = workspace / "models"
    for name in ("config.json", "phi.hmkt", "psi.hmkt", "basis.hmkt", "generator.hmkt", "discriminator.hmkt"):
        assert (models / name).exists()
    with open(models / "generator_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "term", "value"]
    assert {r[1] for r in rows[1:]} >= {"gan", "fm", "pct", "w", "total", "d_loss"}
    assert {r[0] for r in rows[1:]} == {"0", "1"}


def test_generate_eval_and_motion_override(workspace, capsys):
    d = workspace
    assert main(["generate", "--data", str(d / "scene"), "--models", str(d / "models"), "--out", str(d / "gen")]) == 0
    assert len(list((d / "gen").glob("frame_*.png"))) == 16
    capsys.readouterr()
    assert main(["eval", "--gen", str(d / "gen"), "--ref", str(d / "scene")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["start_frame"] == 16 and report["frames"] == 16
    assert -1 <= report["ssim"] <= 1 and report["lmd"] >= 0

    geometry.save_motion_csv(d / "still.csv", np.zeros((16, 6)))
    assert main(["generate", "--data", str(d / "scene"), "--models", str(d / "models"), "--out", str(d / "gen2"), "--motion", str(d / "still.csv")]) == 0
    assert np.abs(geometry.load_motion_csv(d / "gen2" / "motion.csv").to_array()).max() == 0
    assert json.loads((d / "gen2" / "manifest.json").read_text())["driving_motion"] == "override"


def test_disentangle_and_export(workspace, capsys):
    d = workspace
    lm = str(d / "scene" / "landmarks.json")
    assert main(["disentangle", "--landmarks", lm, "--out", str(d / "m.csv"), "--aligned-out", str(d / "a.json")]) == 0
    truth = geometry.load_motion_csv(d / "scene" / "motion.csv").to_array()
    np.testing.assert_allclose(geometry.load_motion_csv(d / "m.csv").to_array(), truth, atol=1e-9)
    assert main(["export-motion-csv", "--landmarks", lm, "--out", str(d / "e.csv"), "--models", str(d / "models")]) == 0
    with open(d / "e.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:7] == ["frame", "rx", "ry", "rz", "tx", "ty", "tz"] and rows[0][7] == "p0"
    assert len(rows) == 33


def test_seed_flag_changes_scene(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(CFG))
    for seed in (4, 5):
        assert main(["synth-data", "--config", str(cfg), "--seed", str(seed), "--out", str(tmp_path / f"s{seed}"), "--frames", "20"]) == 0
    a = (tmp_path / "s4" / "motion.csv").read_text()
    assert a != (tmp_path / "s5" / "motion.csv").read_text()
    assert len(a.splitlines()) == 21
