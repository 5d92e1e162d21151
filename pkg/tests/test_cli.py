import json

import pytest

from icrlab.cli import EXIT_CHECK, EXIT_IO, EXIT_OK, EXIT_USAGE, load_config, main
from icrlab.task_data import read_dataset

SMALL = """# tiny grid for tests
N = 12
H = 24
d = 32
Q = 1,2
O = 3,4
alphas = 0.5
steps = 30
batch_size = 32
M = 128
epochs = 2
eval_size = 256
ood_size = 32
eval_every = 10
seeds = 0
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL + f"out = {tmp_path / 'out'}\n")
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_help_and_usage_errors(cfg_file, capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    with pytest.raises(SystemExit) as e:
        main(["train", "--bogus"])
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == EXIT_USAGE
    assert run("train", "--config", cfg_file, "--model", "Nope") == EXIT_USAGE
    bad = cfg_file.parent / "bad.cfg"
    bad.write_text("colour = blue\n")
    assert run("train", "--config", bad) == EXIT_USAGE
    bad.write_text("N = many\n")
    assert run("train", "--config", bad) == EXIT_USAGE
    assert run("train", "--config", cfg_file, "--eta", "-1") == EXIT_USAGE
    assert run("generate", "--config", cfg_file, "--alpha", "1.5") == EXIT_USAGE


def test_load_config(cfg_file):
    kw = load_config(cfg_file)
    assert kw["Q"] == (1, 2) and kw["alphas"] == (0.5,) and kw["seeds"] == (0,)
    assert kw["steps"] == 30 and isinstance(kw["steps"], int)


def test_generate(cfg_file, tmp_path):
    assert run("generate", "--config", cfg_file) == EXIT_OK
    base = tmp_path / "out" / "data"
    man = json.loads((base / "alpha_0.5" / "seed_0" / "manifest.json").read_text())
    assert {k: v["records"] for k, v in man["files"].items()} == {"train": 128, "eval": 1280, "ood": 32}
    clean, _ = read_dataset(base / "alpha_0" / "seed_0" / "train.csv")
    assert not (clean.Z == 13).any()
    first = (base / "alpha_0.5" / "seed_0" / "train.csv").read_bytes()
    assert run("generate", "--config", cfg_file) == EXIT_OK
    assert (base / "alpha_0.5" / "seed_0" / "train.csv").read_bytes() == first


def test_generate_unwritable(cfg_file, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("generate", "--config", cfg_file, "--out", blocker / "sub") == EXIT_IO


def test_train_check_figures(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert run("check", "--config", cfg_file) == EXIT_OK  # nothing to check yet
    assert run("figures", "--config", cfg_file) == EXIT_IO
    for model in ("Reparam-Linear", "Reparam-Softmax", "Origin-Linear"):
        assert run("train", "--config", cfg_file, "--model", model) == EXIT_OK
    d = out / "runs" / "Reparam-Linear" / "alpha_0.5" / "seed_0"
    assert {p.name for p in d.iterdir()} >= {"trajectory.csv", "checkpoint.npz", "config.txt", "manifest.json"}
    assert "model = Reparam-Linear" in (d / "config.txt").read_text()
    assert run("check", "--config", cfg_file) == EXIT_OK
    assert (out / "checks.csv").exists()
    assert run("figures", "--config", cfg_file) == EXIT_OK
    figs = {p.name for p in (out / "figures").iterdir()}
    assert {"losses.svg", "table.csv", "table.svg"} <= figs
    # tampering is caught
    traj = d / "trajectory.csv"
    traj.write_text(traj.read_text().replace("0.1", "0.2", 1))
    assert run("check", "--config", cfg_file) == EXIT_CHECK


def test_train_finite_mode(cfg_file, tmp_path):
    assert run("train", "--config", cfg_file, "--model", "Reparam-Linear", "--alpha", "0.5",
               "--mode", "finite") == EXIT_OK
    assert run("train", "--config", cfg_file, "--model", "Reparam-Linear", "--alpha", "0",
               "--mode", "finite") == EXIT_USAGE
    assert run("train", "--config", cfg_file, "--model", "Origin-ReLU", "--alpha", "0.5",
               "--mode", "finite") == EXIT_OK
    lines = (tmp_path / "out" / "runs" / "Origin-ReLU" / "alpha_0.5" / "seed_0" / "trajectory.csv"
             ).read_text().splitlines()
    assert len(lines) == 1 + 2 * (128 // 32) + 1  # header + epochs * batches + final record


def test_zero_steps(cfg_file, tmp_path):
    assert run("train", "--config", cfg_file, "--model", "Reparam-ReLU", "--steps", "0",
               "--alpha", "0") == EXIT_OK
    lines = (tmp_path / "out" / "runs" / "Reparam-ReLU" / "alpha_0" / "seed_0" / "trajectory.csv"
             ).read_text().splitlines()
    assert len(lines) == 2
