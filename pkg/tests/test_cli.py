import json
import subprocess
import sys

import pytest

from msdyn.cli import main, resolve


def run(*args):
    return main([str(a) for a in args])


def test_help_lists_commands():
    out = subprocess.run([sys.executable, "-m", "msdyn.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for c in ("gen", "train", "eval", "gridsearch", "linear-lab", "sigmoid-lab"):
        assert c in out.stdout


@pytest.mark.parametrize("command", ["gen", "train", "eval", "gridsearch", "linear-lab", "sigmoid-lab"])
def test_subcommand_help(command, capsys):
    with pytest.raises(SystemExit) as e:
        main([command, "--help"])
    assert e.value.code == 0
    assert "--seed" in capsys.readouterr().out


def test_unknown_flag_exits_1():
    with pytest.raises(SystemExit) as e:
        main(["gen", "--bogus", "1"])
    assert e.value.code == 1


def test_missing_out_exits_1(tmp_path):
    assert run("gen", "--env", "linear") == 1


def test_seed_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[run]\nseed = 7\n[gen]\nepisodes = 3\n")
    base = {"out": "x", "config": None}
    assert resolve("gen", base, env={})["seed"] == 42
    assert resolve("gen", base, env={"MSDYN_SEED": "5"})["seed"] == 5
    cfg = resolve("gen", {**base, "config": str(ini)}, env={"MSDYN_SEED": "5"})
    assert cfg["seed"] == 7 and cfg["episodes"] == 3
    assert resolve("gen", {**base, "config": str(ini), "seed": 9}, env={})["seed"] == 9


def test_unknown_config_key_exits_1(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[gen]\nepisodez = 3\n")
    assert run("gen", "--config", ini, "--out", tmp_path / "o") == 1


def test_pipeline_and_determinism(tmp_path, capsys):
    d = tmp_path / "data"
    assert run("gen", "--env", "cartpole", "--episodes", 10, "--horizon", 30, "--noise", 0.02, "--out", d) == 0
    assert "episode 0: return" in capsys.readouterr().out
    records = []
    for k in range(2):
        o = tmp_path / f"m{k}"
        assert run("train", "--data", d / "dataset.csv", "--h", 2, "--beta", 2, "--epochs", 2,
                   "--hidden", 8, "--out", o) == 0
        records.append((o / "train_record.json").read_bytes())
        assert (o / "model.ckpt").exists() and (o / "config.ini").exists()
    assert records[0] == records[1]
    rec = json.loads(records[0])
    assert rec["status"] == "ok" and len(rec["history"]) == 2
    assert rec["config"]["loss"]["profile"]["alphas"] == pytest.approx([1 / 3, 2 / 3])
    e = tmp_path / "ev"
    assert run("eval", "--data", d / "dataset.csv", "--checkpoint", tmp_path / "m0" / "model.ckpt",
               "--H", 5, "--out", e) == 0
    summary = json.loads((e / "summary.json").read_text())
    assert summary["H"] == 5
    assert (e / "r2_curve.csv").read_text().startswith("h,r2,r2_dim_0")
    # refuses to overwrite, then succeeds with --force
    assert run("gen", "--env", "cartpole", "--episodes", 2, "--horizon", 5, "--out", d) == 1
    assert run("gen", "--env", "cartpole", "--episodes", 2, "--horizon", 5, "--out", d, "--force") == 0


def test_missing_dataset_names_path(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "nope.csv", "--out", tmp_path / "o") == 1
    assert "nope.csv" in capsys.readouterr().err


def test_corrupt_dataset_is_runtime_failure(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("garbage\n")
    assert run("train", "--data", p, "--out", tmp_path / "o") == 2


def test_bad_alphas_exit_1(tmp_path):
    d = tmp_path / "d"
    run("gen", "--env", "linear", "--episodes", 2, "--horizon", 5, "--out", d)
    assert run("train", "--data", d / "dataset.csv", "--model", "linear", "--h", 2, "--alphas", "0.5,0.6",
               "--out", tmp_path / "o") == 1
    assert run("train", "--data", d / "dataset.csv", "--model", "linear", "--h", 2, "--alphas", "1",
               "--out", tmp_path / "o") == 1


def test_divergence_exit_2_with_partial_record(tmp_path):
    d = tmp_path / "d"
    run("gen", "--env", "linear", "--episodes", 3, "--horizon", 20, "--out", d)
    o = tmp_path / "o"
    code = run("train", "--data", d / "dataset.csv", "--model", "linear", "--h", 4, "--optimizer", "sgd",
               "--lr", 1e4, "--epochs", 30, "--out", o)
    assert code == 2
    assert json.loads((o / "train_record.json").read_text())["status"] in ("diverged", "failed")
    assert not (o / "model.ckpt").exists()


def test_linear_lab_small(tmp_path):
    o = tmp_path / "lab"
    assert run("linear-lab", "--n-mc", 5, "--n-theta", 2, "--n-boot", 50, "--n-mc-variance", 1000,
               "--sigmas", "0,0.5", "--out", o) == 0
    for f in ("bias_variance.csv", "baseline_augmented.csv", "baseline_averaging.csv", "variance_checks.json"):
        assert (o / f).exists()


def test_gridsearch_small(tmp_path):
    d = tmp_path / "d"
    run("gen", "--env", "linear", "--episodes", 6, "--horizon", 10, "--out", d)
    o = tmp_path / "g"
    assert run("gridsearch", "--data", d / "dataset.csv", "--model", "linear", "--h", "2", "--betas", "0.5,2",
               "--H", 3, "--epochs", 5, "--lr", 0.05, "--out", o) == 0
    lines = (o / "gridsearch.csv").read_text().splitlines()
    assert lines[0] == "h,beta,fold,r2bar" and len(lines) == 1 + 9
    assert json.loads((o / "summary.json").read_text())["records"][0]["selected_beta"] in (0.5, 2.0)
