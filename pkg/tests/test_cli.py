import json
import subprocess
import sys

import numpy as np
import pytest

from biaspot.cli import main
from biaspot.measures import Grid, density_from_potential, kl_divergence, read_samples_csv
from biaspot.model import Potential, load_potential, sample_features, save_potential


@pytest.fixture
def star_json(tmp_path):
    path = tmp_path / "target.json"
    save_potential(Potential(sample_features(1, 500, 3), np.full(500, 50.0)), path)
    return path


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_train_contract_and_rerun_digests(tmp_path, star_json):
    digests = []
    for run in ("a", "b"):
        out = tmp_path / run
        argv = ["train", "--d", "1", "--m", "500", "--target", str(star_json), "--steps", "50",
                "--opt", "gd", "--lr", "0.5", "--seed", "7", "--out", str(out), "--p", "256"]
        assert main(argv) == 0
        assert (out / "trajectory.csv").exists() and (out / "potential.json").exists()
        digests.append(manifest(out)["outputs"])
    assert digests[0] == digests[1]
    assert set(digests[0]) == {"trajectory.csv", "potential.json"}
    m = manifest(tmp_path / "a")
    assert m["exit_code"] == 0 and m["master_seed"] == 7 and m["version"]


def test_train_missing_target(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 1
    assert "target" in capsys.readouterr().err
    assert manifest(tmp_path)["exit_code"] == 1


def test_train_on_samples_csv(tmp_path, star_json):
    assert main(["sample", "--potential", str(star_json), "--n", "40", "--out", str(tmp_path), "--seed", "1"]) == 0
    out = tmp_path / "run"
    assert main(["train", "--target", str(tmp_path / "samples.csv"), "--m", "50", "--steps", "20",
                 "--opt", "sgd", "--out", str(out), "--seed", "2", "--p", "128"]) == 0
    assert load_potential(out / "potential.json").m == 50


def test_sample_rows_and_determinism(tmp_path, star_json):
    for run in ("a", "b"):
        assert main(["sample", "--potential", str(star_json), "--n", "100", "--seed", "3",
                     "--out", str(tmp_path / run)]) == 0
    s = read_samples_csv(tmp_path / "a" / "samples.csv")
    assert s.n == 100 and np.all(np.abs(s.points) <= 1)
    assert (tmp_path / "a" / "samples.csv").read_bytes() == (tmp_path / "b" / "samples.csv").read_bytes()


@pytest.mark.parametrize("n", ["0", "-5"])
def test_sample_rejects_nonpositive_n(tmp_path, star_json, n):
    assert main(["sample", "--potential", str(star_json), "--n", n, "--out", str(tmp_path)]) == 1


def test_sample_langevin(tmp_path, star_json):
    assert main(["sample", "--potential", str(star_json), "--n", "50", "--sampler", "langevin",
                 "--burn-in", "100", "--out", str(tmp_path)]) == 0
    assert read_samples_csv(tmp_path / "samples.csv").n == 50


def test_eval_metrics(tmp_path, star_json, capsys):
    assert main(["eval", "kl", "--potential", str(star_json), "--against", str(star_json),
                 "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.strip() == "kl=0.0"
    assert main(["eval", "rkhs-norm", "--potential", str(star_json), "--out", str(tmp_path)]) == 0
    assert float(capsys.readouterr().out.strip().split("=")[1]) == pytest.approx(50.0, abs=1e-12)


def test_eval_kl_matches_library(tmp_path, star_json, capsys):
    other = tmp_path / "other.json"
    feats = sample_features(1, 500, 3)
    save_potential(Potential(feats, np.full(500, 20.0)), other)
    assert main(["eval", "kl", "--potential", str(other), "--against", str(star_json), "--p", "512",
                 "--out", str(tmp_path)]) == 0
    value = float(capsys.readouterr().out.strip().split("=")[1])
    grid = Grid(1, 512)
    expected = kl_divergence(density_from_potential(load_potential(star_json), grid),
                             density_from_potential(load_potential(other), grid))
    assert value == pytest.approx(expected, abs=1e-12)
    assert manifest(tmp_path)["result_line"].startswith("kl=")


def test_eval_incompatible_dimensions(tmp_path, star_json):
    two = tmp_path / "two.json"
    save_potential(Potential(sample_features(2, 5, 0), np.ones(5)), two)
    assert main(["eval", "kl", "--potential", str(two), "--against", str(star_json), "--out", str(tmp_path)]) == 1
    assert main(["eval", "loss", "--potential", str(two), "--against", str(star_json),
                 "--out", str(tmp_path)]) == 1


def test_experiment_rate_smoke(tmp_path):
    argv = ["experiment", "rate", "--dims", "1", "--trials", "2", "--ns", "25,50,100", "--seed", "1",
            "--m", "100", "--p", "128", "--max-steps", "300", "--patience-min", "50", "--jobs", "1",
            "--out", str(tmp_path)]
    assert main(argv) == 0
    lines = (tmp_path / "rate_results.csv").read_text().splitlines()
    assert lines[0] == "d,n,trial,seed,T_o,L_o,status"
    assert len(lines) == 7
    assert set(manifest(tmp_path)["outputs"]) == {"rate_results.csv", "rate_regression.csv"}


def test_experiment_rate_defaults_echoed_without_seed(tmp_path):
    assert main(["experiment", "rate", "--out", str(tmp_path)]) == 1
    cfg = manifest(tmp_path)["config"]
    assert cfg["ns"] == [25, 50, 100, 200] and cfg["trials"] == 20
    assert cfg["m"] == 500 and cfg["a_star"] == 50.0
    assert not (tmp_path / "rate_results.csv").exists()


def test_experiment_memorize_smoke(tmp_path):
    argv = ["experiment", "memorize", "--seed", "1", "--steps", "100000", "--m", "50", "--p", "64",
            "--no-control", "--plot", "--out", str(tmp_path)]
    assert main(argv) == 0
    assert len((tmp_path / "memorize_curve.csv").read_text().splitlines()) > 2
    for step in (160, 1000, 10000, 100000):
        assert (tmp_path / f"snapshot_{step}.csv").exists()
    assert (tmp_path / "memorize.svg").read_text().startswith("<svg")


def test_experiment_approx_smoke(tmp_path):
    argv = ["experiment", "approx", "--seed", "0", "--m-ref", "256", "--ms", "16,64,256", "--resamples", "2",
            "--p", "128", "--out", str(tmp_path)]
    assert main(argv) == 0
    assert len((tmp_path / "approx_rate.csv").read_text().splitlines()) == 7


def test_config_file_and_precedence(tmp_path, star_json):
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'target = "{star_json}"\nsteps = 7\nlr = 0.25\np = 64\n')
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--steps", "4", "--out", str(out)]) == 0
    m = manifest(out)["config"]
    assert m["steps"] == 4 and m["lr"] == 0.25
    assert len((out / "trajectory.csv").read_text().splitlines()) == 6


def test_config_unknown_field(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("stpes = 3\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "stpes" in capsys.readouterr().err


def test_unknown_subcommand(tmp_path):
    assert main(["frobnicate", "--out", str(tmp_path)]) == 1
    assert main(["--out", str(tmp_path)]) == 1


def test_help_shows_defaults():
    proc = subprocess.run([sys.executable, "-m", "biaspot", "experiment", "rate", "--help"],
                          capture_output=True, text=True, check=True)
    assert "default: 20" in proc.stdout and "default: 500" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "biaspot", "train", "--help"],
                          capture_output=True, text=True, check=True)
    assert "default: 0.5" in proc.stdout
