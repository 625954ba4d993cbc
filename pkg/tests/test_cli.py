"""CLI smoke tests for the step modules and the end-to-end pipeline."""

import json
import os
import subprocess
import sys
from pathlib import Path

import pytest
import yaml
from conftest import tiny_mapping

from musubi.cli import main

SRC = Path(__file__).resolve().parents[1] / "src"


def _env() -> dict[str, str]:
    env = {k: v for k, v in os.environ.items() if not k.startswith("MUSUBI__")}
    env["PYTHONPATH"] = os.pathsep.join(filter(None, [str(SRC), env.get("PYTHONPATH", "")]))
    return env


def _run_module(module: str, *args: str) -> subprocess.CompletedProcess:
    return subprocess.run(
        [sys.executable, "-m", module, *args],
        capture_output=True,
        text=True,
        env=_env(),
    )


def _write_config(path: Path, *, with_seed: bool = True) -> Path:
    payload = tiny_mapping()
    if not with_seed:
        payload.pop("seed")
    path.write_text(yaml.safe_dump(payload), encoding="utf-8")
    return path


@pytest.mark.parametrize(
    ("module", "prog"),
    [
        ("musubi.cli", "musubi"),
        ("musubi.world", "musubi-generate"),
        ("musubi.training", "musubi-train"),
        ("musubi.evaluation", "musubi-eval"),
    ],
)
def test_help(module: str, prog: str) -> None:
    result = _run_module(module, "--help")
    assert result.returncode == 0
    assert prog in result.stdout


def test_generate_is_reproducible(tmp_path) -> None:
    config = _write_config(tmp_path / "tiny.yaml")
    hashes = []
    for name in ("a", "b"):
        out = tmp_path / name
        result = _run_module("musubi.world", "--config", str(config), "--out", str(out))
        assert result.returncode == 0, result.stderr
        manifest = json.loads((out / "generate_manifest.json").read_text(encoding="utf-8"))
        assert manifest["status"] == "ok"
        assert manifest["seed"] == 0
        hashes.append({k: manifest["artifacts"][k]["sha256"] for k in ("train", "eval", "vocab")})
        assert (out / "train.musubi").exists() and (out / "vocab.txt").exists()
    assert hashes[0] == hashes[1]

    out = tmp_path / "a"
    first = {name: (out / name).read_bytes() for name in ("generate_manifest.json", "train.musubi", "vocab.txt")}
    result = _run_module("musubi.world", "--config", str(config), "--out", str(out))
    assert result.returncode == 0, result.stderr
    for name, content in first.items():
        assert (out / name).read_bytes() == content, name
    assert "created_utc" not in json.loads(first["generate_manifest.json"])


def test_missing_seed_is_an_error(tmp_path) -> None:
    config = _write_config(tmp_path / "noseed.yaml", with_seed=False)
    result = _run_module("musubi.world", "--config", str(config), "--out", str(tmp_path / "out"))
    assert result.returncode == 1
    assert "error:" in result.stderr
    assert "seed" in result.stderr


def test_train_without_dataset_fails_cleanly(tmp_path) -> None:
    rc = main(["train", "--seed", "0", "--out", str(tmp_path), "--stage", "1"])
    assert rc == 1


def test_unknown_command_exits_with_usage() -> None:
    with pytest.raises(SystemExit) as info:
        main(["bogus"])
    assert info.value.code == 2


def test_pipeline_runs_every_step(tmp_path) -> None:
    config = _write_config(tmp_path / "tiny.yaml")
    out = tmp_path / "run"
    rc = main(["pipeline", "--config", str(config), "--out", str(out), "--k-sweep", "2,3,4,6"])
    assert rc == 0

    for stage in (1, 2, 3):
        assert (out / f"stage{stage}.ckpt").exists()
        assert (out / f"train_loss_stage{stage}.png").exists()
    report = (out / "eval_report.txt").read_text(encoding="utf-8")
    sections = [line for line in report.splitlines() if line.startswith("[k=")]
    assert sections == ["[k=2]", "[k=3]", "[k=4]", "[k=6]"]
    assert (out / "k_sweep.png").stat().st_size > 0
    assert (out / "predictions.csv").exists()

    manifest = json.loads((out / "eval_manifest.json").read_text(encoding="utf-8"))
    assert manifest["status"] == "ok"
    train_manifest = json.loads((out / "train_manifest.json").read_text(encoding="utf-8"))
    assert train_manifest["stage"] == 3
