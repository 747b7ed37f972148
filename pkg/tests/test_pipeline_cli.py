"""Run-directory state machine, pipeline reproducibility, and the CLI."""

import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from tests.conftest import tiny_run_config
from uvap.config import RunConfig
from uvap.errors import StageError
from uvap.pipeline import Run, run_pipeline, stage_rank


def _cli(args, home, check=False):
    env = dict(os.environ, UVAP_HOME=str(home))
    proc = subprocess.run([sys.executable, "-m", "uvap.cli", *args],
                          capture_output=True, text=True, env=env)
    if check and proc.returncode != 0:
        raise AssertionError(proc.stderr)
    return proc


def test_config_roundtrip(tmp_path):
    cfg = tiny_run_config()
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()
    assert back.config_hash() == cfg.config_hash()


def test_default_config_valid():
    RunConfig().validate()


def test_pipeline_completes_and_artifacts_exist(tiny_run):
    assert tiny_run.effective_stage() == "evaluated"
    for rel in ("corpus/manifest.jsonl", "checkpoints/base.uvap",
                "checkpoints/g0.uvap", "candidates/pool.jsonl",
                "curated/plus.json", "checkpoints/dual.uvap",
                "reports/latest.json", "reports/latest.md"):
        assert (tiny_run.dir / rel).exists(), rel
    reports = json.loads((tiny_run.dir / "reports" / "latest.json").read_text())
    methods = {(r["condition"].get("method"), r["condition"].get("m"))
               for r in reports}
    assert ("prelearn-only", None) in methods
    assert ("tgt-literal", None) in methods
    assert ("adjusted", 4) in methods and ("adjusted", 8) in methods


def test_pipeline_rerun_reproduces_artifacts_byte_identically(tmp_path):
    cfg = tiny_run_config(seed=13)
    run = Run(tmp_path, "det")
    run_pipeline(run, cfg)
    inventory = {
        str(p.relative_to(run.dir)): p.read_bytes()
        for p in run.dir.rglob("*")
        if p.is_file() and p.name != "state.json"
    }
    # Delete every derived artifact, keep config + decisions, re-run.
    for rel in ("corpus", "checkpoints", "candidates", "curated", "logs",
                "priors", "reports"):
        shutil.rmtree(run.dir / rel, ignore_errors=True)
    (run.dir / "state.json").unlink()
    run_pipeline(run, cfg)
    after = {
        str(p.relative_to(run.dir)): p.read_bytes()
        for p in run.dir.rglob("*")
        if p.is_file() and p.name != "state.json"
    }
    assert set(inventory) == set(after)
    different = [k for k in inventory if inventory[k] != after[k]]
    assert different == []


def test_stage_gate_enforced(tmp_path):
    run = Run(tmp_path, "gate")
    run.create(tiny_run_config())
    with pytest.raises(StageError, match="requires stage: curated"):
        from uvap.pipeline import stage_dual
        stage_dual(run, run.config())


def test_config_change_invalidates_later_stages(tiny_run, tmp_path):
    run = Run(tiny_run.dir.parent, tiny_run.run_id)
    assert run.effective_stage() == "evaluated"
    changed = RunConfig.from_dict(run.config().to_dict())
    changed.eval.seeds_per_condition = 6
    assert run.effective_stage(changed) == "dual_trained"
    changed2 = RunConfig.from_dict(run.config().to_dict())
    changed2.base.steps += 1
    assert run.effective_stage(changed2) == "created"


def test_stage_skipping_on_rerun(tiny_run):
    # Re-running against the same config touches nothing.
    before = (tiny_run.dir / "checkpoints" / "dual.uvap").stat().st_mtime_ns
    run_pipeline(tiny_run, tiny_run.config())
    after = (tiny_run.dir / "checkpoints" / "dual.uvap").stat().st_mtime_ns
    assert before == after


# ---------------------------------------------------------------------------
# CLI

@pytest.fixture(scope="module")
def cli_home(tmp_path_factory):
    home = tmp_path_factory.mktemp("home")
    cfg = tiny_run_config()
    cfg.save(home / "tiny.json")
    proc = _cli(["pipeline", "--run", "r1", "--config", str(home / "tiny.json")],
                home, check=True)
    assert "evaluated" in proc.stdout
    return home


def test_cli_unknown_subcommand_exits_2(tmp_path):
    proc = _cli(["frobnicate", "--run", "x"], tmp_path)
    assert proc.returncode == 2


def test_cli_unknown_flag_exits_2(tmp_path):
    proc = _cli(["synth", "--run", "x", "--bogus"], tmp_path)
    assert proc.returncode == 2


def test_cli_stage_gate_exit_3(cli_home):
    cfg_path = cli_home / "tiny.json"
    proc = _cli(["dual-train", "--run", "fresh", "--config", str(cfg_path)],
                cli_home)
    assert proc.returncode == 3
    assert "requires stage: curated" in proc.stderr


def test_cli_sample_writes_images(cli_home):
    proc = _cli(["sample", "--run", "r1", "--prompt",
                 "a photo of a sks color circle", "--lambda", "0.3",
                 "--count", "2", "--name", "probe"], cli_home, check=True)
    out = cli_home / "r1" / "samples" / "probe"
    assert sorted(p.name for p in out.iterdir()) == \
        ["000.png", "001.png", "request.json"]
    echo = json.loads((out / "request.json").read_text())
    assert echo["specs"][0]["lambda"] == 0.3


def test_cli_sweep(cli_home):
    _cli(["sweep", "--run", "r1"], cli_home, check=True)
    assert (cli_home / "r1" / "reports" / "sweep.json").exists()


def test_lock_blocks_training(cli_home):
    run = Run(cli_home, "r1")
    run.acquire_lock()
    try:
        proc = _cli(["train-base", "--run", "r1"], cli_home)
        assert proc.returncode == 1
        assert "locked" in proc.stderr
    finally:
        run.release_lock()
