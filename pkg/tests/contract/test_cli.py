"""Contract tests for CLI."""

import os
import subprocess
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[2]


def get_minimal_env():
    """Get the current environment without XAVT_* variables so runs only see their own config."""
    return {name: value for name, value in os.environ.items() if not name.startswith("XAVT_")}


def run_cli(*args: str, env: dict | None = None) -> subprocess.CompletedProcess:
    return subprocess.run(
        [sys.executable, "-m", "src.cli.main", *args],
        capture_output=True,
        text=True,
        cwd=ROOT,
        env=get_minimal_env() if env is None else env,
    )


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """A small toy-geometry dataset shared by the tests of this module."""
    out = tmp_path_factory.mktemp("data")
    result = run_cli("gen", "--preset", "toy", "--samples-per-class", "4", "--seed", "1", "--out", str(out))
    assert result.returncode == 0, result.stderr
    return out / "index.tsv"


@pytest.fixture(scope="module")
def toy_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "toy.env"
    path.write_text("preset=toy\nepochs=1\nwarmup_epochs=0\nbatch_size=4\n")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset, toy_config):
    """Output directory of a one-epoch toy training run."""
    out = tmp_path_factory.mktemp("run")
    result = run_cli("train", "--config", str(toy_config), "--index", str(dataset), "--output", str(out))
    assert result.returncode == 0, result.stderr
    return out


def test_cli_help():
    """Test that CLI shows help message."""
    result = run_cli("--help")
    assert result.returncode == 0
    for command in ("gen", "train", "eval", "gradcheck", "entropy", "attmap", "inspect"):
        assert command in result.stdout


def test_gen_is_reproducible(tmp_path, dataset):
    """Test that the same seed writes byte-identical files."""
    result = run_cli("gen", "--preset", "toy", "--samples-per-class", "4", "--seed", "1", "--out", str(tmp_path))
    assert result.returncode == 0, result.stderr
    assert "Wrote 8 samples (xor-coupled, 2 classes)" in result.stdout
    for name in ("index.tsv", "c0_00000.xavc", "c1_00007.xavc"):
        assert (tmp_path / name).read_bytes() == (dataset.parent / name).read_bytes()


def test_train_writes_run_files(trained):
    """Test the checkpoint, step log and effective config of a training run."""
    assert (trained / "model.xavt").is_file()
    log = (trained / "train.log").read_text().splitlines()
    assert len(log) == 2
    assert log[0].startswith("1\t0\t")
    assert "preset=toy" in (trained / "config.env").read_text()


def test_eval_is_deterministic(trained, dataset, toy_config):
    """Test that evaluating the same checkpoint twice prints the same report."""
    args = ("eval", "-c", str(toy_config), "--checkpoint", str(trained / "model.xavt"), "--index", str(dataset))
    first, second = run_cli(*args, "--views", "1x1"), run_cli(*args, "--views", "1x1")
    assert first.returncode == 0, first.stderr
    assert first.stdout == second.stdout
    lines = first.stdout.splitlines()
    assert lines[:2] == ["samples\t8", "views\t1x1"]
    assert lines[2].startswith("top1\t")
    assert lines[-1].startswith("f1[1]\t")


def test_inspect_lists_tensors(trained):
    """Test the checkpoint listing format."""
    result = run_cli("inspect", str(trained / "model.xavt"))
    assert result.returncode == 0, result.stderr
    rows = [line.split("\t") for line in result.stdout.splitlines()[:-1]]
    names = [row[0] for row in rows]
    assert names == sorted(names)
    assert ["head.classifier.b", "2", "trainable"] == rows[names.index("head.classifier.b")][:3]
    assert ["spatial.patch.w", "192x32", "frozen"] == rows[names.index("spatial.patch.w")][:3]
    assert all(len(row[3]) == 64 for row in rows)
    assert result.stdout.splitlines()[-1].endswith("values")


def test_entropy_and_attmap(tmp_path, trained, dataset, toy_config):
    """Test the entropy table and the attention-map export of a trained checkpoint."""
    common = ("-c", str(toy_config), "--checkpoint", str(trained / "model.xavt"), "--index", str(dataset))
    result = run_cli("entropy", *common, "--direction", "S2T", "--limit", "2", "--out", str(tmp_path / "curve.tsv"))
    assert result.returncode == 0, result.stderr
    assert result.stdout.splitlines()[0] == "layer\tratio"
    assert (tmp_path / "curve.tsv").read_text() == result.stdout

    maps = tmp_path / "maps"
    result = run_cli("attmap", *common, "--layer", "1", "--direction", "S2T", "--out", str(maps))
    assert result.returncode == 0, result.stderr
    assert (maps / "S2T_layer1_frame0.pgm").is_file()
    assert (maps / "S2T_layer1_frame1.pgm").is_file()
    assert (maps / "c0_00000.xava").is_file()


@pytest.mark.parametrize("precision", ["32", "64"])
@pytest.mark.parametrize("variant", ["CAST", "CAVA", "CA2ST"])
def test_gradcheck_passes_on_toy_model(variant, precision):
    """Test the gradient check command at its default tolerance for every variant and precision."""
    result = run_cli("gradcheck", "--variant", variant, "--toy", "--precision", precision, "--max-elements", "2")
    assert result.returncode == 0, result.stdout + result.stderr
    bar = "1e-06" if precision == "64" else "0.001"
    assert f"(tolerance {bar})" in result.stdout
    assert result.stdout.splitlines()[-1] == "PASS"


def test_gradcheck_failure_exit_code():
    """Test that a coarse step fails the tight bar with the verification status."""
    result = run_cli("gradcheck", "--variant", "CAST", "--toy", "--max-elements", "1", "--h", "0.5")
    assert result.returncode == 3
    assert "gradient check failed" in result.stderr


def test_cli_missing_index(tmp_path):
    """Test that a nonexistent index path is a usage error."""
    result = run_cli("eval", "--index", str(tmp_path / "missing.tsv"))
    assert result.returncode == 2
    assert "does not exist" in result.stderr


def test_cli_bad_checkpoint(tmp_path, dataset, toy_config):
    """Test that a corrupt checkpoint exits with the contract status."""
    bad = tmp_path / "bad.xavt"
    bad.write_bytes(b"not a checkpoint")
    result = run_cli("eval", "-c", str(toy_config), "--checkpoint", str(bad), "--index", str(dataset))
    assert result.returncode == 2
    assert result.stderr.splitlines()[-1].startswith("Error: ")
    assert "bad magic" in result.stderr


def test_cli_unknown_config_key(tmp_path, dataset):
    """Test that an unknown config key exits with the contract status."""
    config = tmp_path / "typo.env"
    config.write_text("preset=toy\nepochz=1\n")
    result = run_cli("train", "--config", str(config), "--index", str(dataset), "--output", str(tmp_path / "run"))
    assert result.returncode == 2
    assert "unknown config keys" in result.stderr


def test_cli_env_variables_apply(tmp_path, dataset):
    """Test that XAVT_* variables feed the run configuration."""
    env = get_minimal_env()
    env["XAVT_PRESET"] = "huge"
    result = run_cli("eval", "--index", str(dataset), env=env)
    assert result.returncode == 2
    assert "unknown preset" in result.stderr
