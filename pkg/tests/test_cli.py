import json
import subprocess
import sys

import numpy as np
import pytest

from vlffd.cli import COMMANDS, main
from vlffd.imaging import read_pgm16

from conftest import TINY


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def _run(*argv):
    return main([str(a) for a in argv])


def _error_line(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.mark.parametrize("command", COMMANDS)
def test_help_exits_zero_without_side_effects(command, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert _run(command, "--help") == 0
    assert "usage" in capsys.readouterr().out
    assert list(tmp_path.iterdir()) == []


def test_unknown_subcommand_is_usage_error(capsys):
    assert _run("frobnicate") == 2
    assert _error_line(capsys)["error"] == "UsageError"


def test_malformed_config_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"vlfm": {"bogus": 1}}')
    assert _run("validate", "--config", bad, "--out-dir", tmp_path / "o") == 2
    assert _error_line(capsys)["error"] == "ConfigError"


def test_stage3_without_stage2_is_order_error(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    assert _run("train", "--stage", "1", "--config", cfg_path, "--out-dir", out) == 0
    capsys.readouterr()
    assert _run("train", "--stage", "3", "--config", cfg_path, "--out-dir", out) == 1
    err = _error_line(capsys)
    assert err["error"] == "PipelineOrderError" and "stage-2" in err["message"]


def test_synth_writes_corpus_and_replayable_manifest(tmp_path, cfg_path):
    out = tmp_path / "a"
    assert _run("synth", "--config", cfg_path, "--seed", 7, "--identities", 2, "--out-dir", out) == 0
    index = out / "corpus" / "index.jsonl"
    assert len(index.read_text().splitlines()) == 2 * 5
    manifest = json.loads((out / "synth.manifest.json").read_text())
    assert manifest["config"]["corpus"]["identities"] == 2
    replay = tmp_path / "b"
    assert _run("synth", "--config", out / "synth.manifest.json", "--out-dir", replay) == 0
    again = json.loads((replay / "synth.manifest.json").read_text())
    assert again["outputs"] == manifest["outputs"]


def test_staged_cli_pipeline(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    common = ["--config", cfg_path, "--out-dir", out]
    assert _run("synth", *common) == 0
    assert _run("annotate", *common) == 0
    assert _run("validate", *common) == 0
    for stage in ("1", "2", "3"):
        assert _run("train", "--stage", stage, *common) == 0
    ck = [json.loads((out / "checkpoints" / f"stage{s}" / "manifest.json").read_text()) for s in (1, 2, 3)]
    assert ck[0]["groups"]["detector"]["sha256"] == ck[2]["groups"]["detector"]["sha256"]
    assert ck[1]["groups"]["text_pathway"]["sha256"] == ck[2]["groups"]["text_pathway"]["sha256"]

    assert _run("eval", "--split", "both", *common) == 0
    metrics = json.loads((out / "eval.json").read_text())
    assert {"intra", "cross", "grounding"} <= set(metrics)

    assert _run("export-attn", "--count", 3, *common) == 0
    sidecars = sorted((out / "attention").glob("*.json"))
    assert len(sidecars) == 3
    meta = json.loads(sidecars[0].read_text())
    assert meta["layer"] == 1 and meta["head_aggregation"] == "mean"
    lo, hi = meta["normalization_bounds"]
    assert 0.0 <= lo <= hi <= 1.0
    heat = read_pgm16(sidecars[0].with_suffix(".pgm"))
    assert heat.shape == tuple(meta["grid"]) and np.isclose(heat.max(), 1.0)
    for name in ("synth", "annotate", "train_stage3", "eval", "export-attn"):
        assert (out / f"{name}.manifest.json").exists()


def test_train_all_and_ablate(tmp_path, cfg_path):
    out = tmp_path / "run"
    assert _run("train", "--stage", "all", "--config", cfg_path, "--out-dir", out) == 0
    assert "intra" in json.loads((out / "metrics.json").read_text())
    assert _run("ablate", "--grid", "table6", "--config", cfg_path, "--out-dir", out) == 0
    lines = (out / "table6.csv").read_text().splitlines()
    assert len(lines) == 1 + 6


def test_http_client_needs_live_config(tmp_path, cfg_path, capsys):
    assert _run("annotate", "--client", "http", "--config", cfg_path, "--out-dir", tmp_path) == 2
    assert _error_line(capsys)["error"] == "ConfigError"


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "vlffd.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "synth" in proc.stdout
