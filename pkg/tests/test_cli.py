from __future__ import annotations

import json

import numpy as np
import pytest

from splitbg.cli import EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC, EXIT_OK, main, split_dataset
from splitbg.config import ConfigError, config_from_json, desk_config, load_config


def tiny_config(**over) -> dict:
    cfg = {
        "system": {"kind": "toy_chain", "n_residues": 2},
        "dataset": "data.bgic",
        "output": "run",
        "data": {"n_frames": 1200, "burn_in": 1000, "thin": 5, "chains": 16, "step_size": 0.05, "seed": 0},
        "architecture": {"n_backbone_blocks": 2, "n_joint_blocks": 1,
                         "conditioner": {"model_dim": 16, "query_dim": 8, "key_dim": 8, "value_dim": 16}},
        "training": {"batch_size": 128, "eval_samples": 64,
                     "stages": [{"name": "nll", "epochs": 2}, {"name": "nll_w2", "epochs": 1, "w2": True},
                                {"name": "nll_w2_kl", "epochs": 1, "w2": True, "kl": True},
                                {"name": "nll_kl", "epochs": 1, "kl": True}]},
        "evaluation": {"n_samples": 400, "batch_size": 100, "n_features": 50},
    }
    cfg.update(over)
    return cfg


def write(tmp_path, cfg) -> str:
    p = tmp_path / "config.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def test_config_round_trip(tmp_path):
    cfg = config_from_json(tiny_config(), tmp_path)
    again = config_from_json(json.loads(cfg.dumps()), tmp_path)
    assert again.dumps() == cfg.dumps()
    assert load_config(write(tmp_path, tiny_config())).dumps() == cfg.dumps()
    assert desk_config().architecture.n_backbone_blocks == 8


@pytest.mark.parametrize("bad", [{"learning": 1}, {"data": {"frames": 3}}, {"training": {"lr": 1, "x": 2}},
                                 {"architecture": {"blocks": 3}}, {"evaluation": {"bins": 3}}])
def test_unknown_keys_rejected(tmp_path, bad):
    with pytest.raises(ConfigError):
        config_from_json(tiny_config(**bad), tmp_path)


def test_validation_errors(tmp_path):
    for over in ({"temperature": -1.0}, {"heldout_fraction": 1.5}, {"system": None},
                 {"system": {"kind": "protein", "n_residues": 3}}, {"topology": "missing.json", "system": None,
                                                                     "forcefield": "f.json"}):
        with pytest.raises(ConfigError):
            config_from_json(tiny_config(**over), tmp_path).validate()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")


def test_split_dataset_is_seeded_partition():
    frames = np.arange(100.0)[:, None]
    a, b = split_dataset(frames, 0.2, 0)
    assert len(a) == 80 and len(b) == 20
    assert sorted(np.concatenate([a, b])[:, 0]) == list(range(100))
    a2, _ = split_dataset(frames, 0.2, 0)
    a3, _ = split_dataset(frames, 0.2, 1)
    assert np.array_equal(a, a2) and not np.array_equal(a, a3)


def test_inspect_default_and_dry_run(tmp_path, capsys):
    assert main(["--out", str(tmp_path), "inspect"]) == EXIT_OK
    assert "counts=(22, 21, 8)" in capsys.readouterr().out
    assert main(["--out", str(tmp_path), "train", "--dry-run"]) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["parameters"] == 327_044 and info["dim"] == 51


def test_exit_codes(tmp_path, capsys):
    cfg = write(tmp_path, tiny_config())
    assert main(["--config", cfg, "train"]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text(json.dumps(tiny_config(extra=1)))
    assert main(["--config", str(tmp_path / "bad.json"), "inspect"]) == EXIT_CONFIG
    (tmp_path / "junk.ckpt").write_bytes(b"JUNKJUNKJUNK")
    assert main(["--config", cfg, "inspect", str(tmp_path / "junk.ckpt")]) == EXIT_FORMAT
    (tmp_path / "data.bgic").write_bytes(b"BGIC\x07\0\0\0")
    assert main(["--config", cfg, "evaluate", str(tmp_path / "junk.ckpt")]) == EXIT_FORMAT
    stuck = tiny_config(data={"n_frames": 10, "burn_in": 0, "chains": 4, "step_size": 50.0})
    assert main(["--config", write(tmp_path, stuck), "generate-data"]) == EXIT_NUMERIC
    capsys.readouterr()


def test_end_to_end(tmp_path, capsys):
    cfg = write(tmp_path, tiny_config())
    assert main(["--config", cfg, "generate-data"]) == EXIT_OK
    assert (tmp_path / "data.bgic").exists() and (tmp_path / "run" / "topology.json").exists()
    assert main(["--config", cfg, "train"]) == EXIT_OK
    run = tmp_path / "run"
    assert sorted(p.name for p in run.glob("*.ckpt")) == [f"stage{k}.ckpt" for k in range(1, 5)]
    assert len((run / "metrics.csv").read_text().splitlines()) == 1 + 5
    assert main(["--config", cfg, "sample", str(run / "stage4.ckpt"), "-n", "50"]) == EXIT_OK
    assert len((run / "samples.csv").read_text().splitlines()) == 51
    assert main(["--config", cfg, "evaluate", str(run / "stage4.ckpt")]) == EXIT_OK
    report = json.loads((run / "evaluation" / "report.json").read_text())
    assert report["delta_d"]["n"] == 2 and len(report["rmsf_samples"]) == 2
    assert main(["--config", cfg, "inspect", str(run / "stage2.ckpt")]) == EXIT_OK
    assert '"stage": 2' in capsys.readouterr().out
    assert main(["--config", cfg, "train", "--resume", str(run / "stage3.ckpt")]) == EXIT_OK
    resumed = (run / "metrics_from_stage4.csv").read_text().splitlines()
    assert resumed[1] == (run / "metrics.csv").read_text().splitlines()[-1]
    assert main(["--config", cfg, "--threads", "1", "inspect", str(tmp_path / "data.bgic")]) == EXIT_OK
    assert "frames=1200" in capsys.readouterr().out
