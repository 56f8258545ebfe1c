import csv
import io
import json
import math

import pytest

from vlffd.ablation import BUILTIN_GRIDS, Grid, load_grid, run_ablation
from vlffd.errors import ConfigError


def test_builtin_grids_load():
    for name in BUILTIN_GRIDS:
        grid = load_grid(name)
        assert grid.cells and grid.name == name
    assert load_grid("table6.json").name == "table6"


def test_table_shapes():
    assert len(load_grid("table6").cells) == 6
    layers = [c.delta["vlfm"]["layers"] for c in load_grid("table8").cells]
    assert layers == [1, 2, 3, 4]
    strategies = {c.delta.get("strategy", "three") for c in load_grid("table7").cells}
    assert strategies == {"one", "two", "three"}


def test_grid_validation(tmp_path):
    with pytest.raises(ConfigError):
        Grid.from_dict({"cells": []})
    with pytest.raises(ConfigError):
        Grid.from_dict({"cells": [{"id": "a"}, {"id": "a"}]})
    with pytest.raises(ConfigError):
        Grid.from_dict({"name": "x"})
    with pytest.raises(ConfigError):
        load_grid(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_grid(bad)


def _rows(report):
    return list(csv.DictReader(io.StringIO(report.csv_text())))


def test_table6_on_tiny_corpus(tiny_cfg, tmp_path):
    report = run_ablation(load_grid("table6"), tiny_cfg)
    rows = _rows(report)
    assert len(rows) == 6
    assert [r["cell"] for r in rows] == [c.id for c in load_grid("table6").cells]
    for r in rows:
        assert r["status"] == "ok" and r["split"] == "cross"
        assert math.isfinite(float(r["average"]))
    csv_path, manifest_path = report.write(tmp_path)
    manifest = json.loads(manifest_path.read_text())
    assert manifest["report_sha256"] == report.sha256
    assert all(c["checkpoint_hashes"] for c in manifest["cells"])
    assert csv_path.read_text() == report.csv_text()


def test_same_seed_same_report(tiny_cfg):
    grid = Grid.from_dict({"name": "pair", "cells": [{"id": "full"}, {"id": "add", "delta": {"vlfm": {"fusion_mode": "addition"}}}]})
    assert run_ablation(grid, tiny_cfg).sha256 == run_ablation(grid, tiny_cfg).sha256


def test_failed_cell_is_recorded(tiny_cfg):
    grid = Grid.from_dict({"name": "mixed", "cells": [
        {"id": "bad_heads", "delta": {"vlfm": {"n_heads": 3}}},
        {"id": "full"},
    ]})
    rows = _rows(run_ablation(grid, tiny_cfg))
    assert rows[0]["cell"] == "bad_heads" and rows[0]["status"].startswith("failed: ConfigError")
    assert rows[1]["status"] == "ok"
