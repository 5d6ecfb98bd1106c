import json

import numpy as np

from pombu.envs import build_chain_posterior
from pombu.harness.cli import main

from .test_harness import TINY


def write_tiny_config(path, **extra):
    doc = json.loads(json.dumps(TINY))
    doc.update(extra)
    path.write_text(json.dumps(doc))
    return path


def test_appendix_c(tmp_path):
    out = tmp_path / "runs" / "c"
    assert main(["appendix-c", "--horizons", "2,4", "--out", str(out)]) == 0
    lines = (out / "appendix_c.csv").read_text().splitlines()
    assert lines[0] == "H,h,s,a,var_oracle,U,B"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "appendix-c"
    assert set(manifest["versions"]) >= {"pombu", "python", "numpy", "kernel_backend"}
    assert (out / "appendix_c_summary.csv").exists()


def test_validate_config_names_bad_field(tmp_path, capsys):
    path = write_tiny_config(tmp_path / "bad.json", gamma=1.5)
    assert main(["validate-config", "--config", str(path)]) == 1
    assert "gamma" in capsys.readouterr().err


def test_validate_config_ok(tmp_path, capsys):
    path = write_tiny_config(tmp_path / "ok.json")
    assert main(["validate-config", "--config", str(path)]) == 0
    assert "ok" in capsys.readouterr().out


def test_validate_config_requires_path():
    assert main(["validate-config"]) == 1


def test_unknown_subcommand(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag():
    assert main(["appendix-c", "--bogus"]) == 1


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1


def test_train_is_reproducible_and_eval(tmp_path):
    cfg = write_tiny_config(tmp_path / "c.json")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(cfg), "--seed", "3", "--out", str(a)]) == 0
    assert main(["train", "--config", str(cfg), "--seed", "3", "--out", str(b)]) == 0
    assert (a / "train.csv").read_bytes() == (b / "train.csv").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["argv"][0] == "train"

    assert main(["eval", "--config", str(cfg), "--out", str(a), "--trajectories", "4"]) == 0
    report = json.loads((a / "eval.json").read_text())
    assert report["trajectories"] == 4 and np.isfinite(report["mean_return"])


def test_eval_without_policy(tmp_path):
    assert main(["eval", "--out", str(tmp_path / "empty")]) == 1


def test_solve_uncertainty(tmp_path):
    post = tmp_path / "post.json"
    build_chain_posterior(3).save(post)
    out = tmp_path / "u"
    assert main(["solve-uncertainty", "--posterior", str(post), "--out", str(out)]) == 0
    lines = (out / "uncertainty.csv").read_text().splitlines()
    assert lines[0] == "h,s,a,u,U,nu,B,var_oracle"
    assert len(lines) == 1 + 3 * 5 * 2


def test_malformed_posterior_is_a_validation_error(tmp_path):
    post = tmp_path / "post.json"
    post.write_text(json.dumps({"members": "not a list"}))
    assert main(["solve-uncertainty", "--posterior", str(post), "--out", str(tmp_path / "u")]) == 1


def test_stage_failure_exit_code(tmp_path, monkeypatch, capsys):
    from pombu.harness import cli
    from pombu.harness.loop import RunLog, StageError

    def failing(cfg):
        exc = StageError("train_ensemble", 1, RuntimeError("diverged"))
        exc.log = RunLog(seed=cfg.seed, config_digest=cfg.digest())
        raise exc

    monkeypatch.setattr(cli, "run_pombu", failing)
    cfg = write_tiny_config(tmp_path / "c.json")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "train_ensemble" in capsys.readouterr().err
    assert "error" in json.loads((tmp_path / "o" / "manifest.json").read_text())
