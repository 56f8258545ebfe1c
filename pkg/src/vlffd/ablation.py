"""Ablation grids: each cell is a config delta trained and scored under one seed.

A grid file looks like::

    {"name": "table6", "protocol": "cross",
     "base": {...optional delta applied to every cell...},
     "cells": [{"id": "full", "delta": {}},
               {"id": "no_cross_attention", "delta": {"vlfm": {"img_to_text": false, "text_to_img": false}}}]}

Cells sharing a stage prefix reuse the cached checkpoint, so a fusion-only grid
trains the detector and text pathway once.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from .config import RunConfig
from .errors import ConfigError, VlffdError
from .pipeline import run_experiment
from .synth import Corpus

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("cell", "split", "M1", "M2", "M3", "M4", "all", "average", "status")
BUILTIN_GRIDS = ("table4", "table5", "table6", "table7", "table8")


@dataclass
class GridCell:
    id: str
    delta: dict[str, Any] = field(default_factory=dict)


@dataclass
class Grid:
    name: str
    cells: list[GridCell]
    protocol: str | None = None
    base: dict[str, Any] = field(default_factory=dict)
    splits: tuple[str, ...] | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "Grid":
        try:
            cells = [GridCell(str(c["id"]), dict(c.get("delta", {}))) for c in raw["cells"]]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed grid: {exc}") from exc
        if not cells:
            raise ConfigError("grid has no cells")
        ids = [c.id for c in cells]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate cell ids in grid: {ids}")
        splits = raw.get("splits")
        return cls(raw.get("name", "grid"), cells, raw.get("protocol"), dict(raw.get("base", {})),
                   tuple(splits) if splits else None)


def load_grid(path_or_name: str | Path) -> Grid:
    """A grid from a JSON path, or one of the bundled grids by name (``table6`` or ``table6.json``)."""
    path = Path(path_or_name)
    if path.exists():
        text = path.read_text()
    else:
        stem = path.name.removesuffix(".json")
        if stem not in BUILTIN_GRIDS:
            raise ConfigError(f"no grid file {path_or_name} and no bundled grid named {stem!r}")
        text = resources.files("vlffd.grids").joinpath(f"{stem}.json").read_text()
    try:
        return Grid.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid {path_or_name} is not valid JSON: {exc}") from exc


@dataclass
class CellOutcome:
    cell: GridCell
    config: dict | None
    metrics: dict[str, dict[str, float]]
    checkpoint_hashes: dict[str, str]
    error: str | None = None


@dataclass
class AblationReport:
    grid: Grid
    seed: int
    outcomes: list[CellOutcome]

    def rows(self) -> list[dict[str, Any]]:
        rows = []
        for o in self.outcomes:
            splits = [s for s in o.metrics if not s.endswith("_detector")]
            if o.error is not None or not splits:
                rows.append({"cell": o.cell.id, "split": "", "status": f"failed: {o.error}"})
                continue
            for split in splits:
                m = o.metrics[split]
                rows.append({"cell": o.cell.id, "split": split, "status": "ok",
                             **{k: f"{m[k]:.6f}" for k in REPORT_COLUMNS[2:8]}})
        return rows

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: row.get(k, "") for k in REPORT_COLUMNS})
        return buf.getvalue()

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.csv_text().encode()).hexdigest()

    def manifest(self) -> dict:
        return {
            "grid": self.grid.name,
            "seed": self.seed,
            "report_sha256": self.sha256,
            "cells": [{"id": o.cell.id, "delta": o.cell.delta, "config": o.config, "metrics": o.metrics,
                       "checkpoint_hashes": o.checkpoint_hashes, "error": o.error} for o in self.outcomes],
        }

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{self.grid.name}.csv"
        manifest_path = out_dir / f"{self.grid.name}.manifest.json"
        csv_path.write_text(self.csv_text())
        manifest_path.write_text(json.dumps(self.manifest(), indent=2))
        return csv_path, manifest_path


def run_ablation(grid: Grid, base: RunConfig | None = None, corpus: Corpus | None = None,
                 cross_corpus: Corpus | None = None,
                 progress: Callable[[str], None] | None = None) -> AblationReport:
    """Run every cell of ``grid`` under the seed of ``base``; failed cells are recorded, not raised."""
    base = base or RunConfig()
    if grid.base:
        base = base.with_overrides(grid.base)
    if grid.protocol:
        base = base.with_overrides({"protocol": grid.protocol})
    say = progress or log.info
    cache: dict = {}
    outcomes = []
    for i, cell in enumerate(grid.cells, start=1):
        say(f"[{i}/{len(grid.cells)}] {grid.name}/{cell.id}")
        cfg_dict = None
        try:
            cfg = base.with_overrides(cell.delta)
            cfg_dict = cfg.to_dict()
            shared = cfg.corpus == base.corpus
            result = run_experiment(cfg, corpus=corpus if shared else None,
                                    cross_corpus=cross_corpus if shared else None, cache=cache,
                                    splits=grid.splits, progress=say)
        except VlffdError as exc:
            log.warning("cell %s failed: %s", cell.id, exc)
            outcomes.append(CellOutcome(cell, cfg_dict, {}, {}, f"{type(exc).__name__}: {exc}"))
            continue
        if shared:
            corpus = corpus or result.corpus
        outcomes.append(CellOutcome(cell, cfg_dict, result.metrics, result.state.hashes()))
    return AblationReport(grid, base.seed, outcomes)
