"""``vlffd`` command line: corpus, annotation, staged training, evaluation, ablations.

Every subcommand writes ``<out-dir>/<command>.manifest.json`` holding the
resolved config, the argv and the sha256 of every file it produced. Passing a
manifest back through ``--config`` replays the run.

Exit codes: 0 success, 1 pipeline failure (one JSON line on stderr), 2 usage
or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .ablation import load_grid, run_ablation
from .annotator.clients import HttpClient, LiveClientConfig, MockClient
from .annotator.pipeline import read_records, run_annotation
from .annotator.records import validate_annotation
from .config import RunConfig, load_run_config
from .errors import ConfigError, DataError, PipelineOrderError, VlffdError
from .imaging import write_pgm16
from .model import ModelState
from .pipeline import (
    box_in_crop, build_corpus, cell_hits_box, classification_data, crop, eval_set, evaluate, grounding,
    run_experiment, split_identities, text_data,
)
from .synth import Corpus, load_corpus, save_corpus
from .tensor import Tensor, no_grad
from .training import detector_features, run_stage, text_features
from .vlfm import argmax_cell, attention_map, normalize_map

log = logging.getLogger("vlffd")

COMMANDS = ("synth", "annotate", "train", "eval", "ablate", "export-attn", "validate")


class UsageError(Exception):
    pass


# -- shared plumbing ------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    delta: dict = {}
    if getattr(args, "seed", None) is not None:
        delta["seed"] = args.seed
        delta["corpus"] = {"seed": args.seed}
    if getattr(args, "identities", None) is not None:
        delta.setdefault("corpus", {})["identities"] = args.identities
    if getattr(args, "protocol", None) is not None:
        delta["protocol"] = args.protocol
    if delta:
        cfg = cfg.with_overrides(delta)
    cfg.validate()
    return cfg


def _write_manifest(out_dir: Path, command: str, argv: Sequence[str], cfg: RunConfig | None,
                    outputs: list[Path], extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": None if cfg is None else cfg.to_dict(),
        "outputs": {str(p.relative_to(out_dir)) if p.is_relative_to(out_dir) else str(p): _sha256(p)
                    for p in outputs if p.is_file()},
    }
    if extra:
        manifest.update(extra)
    path = out_dir / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def _corpus(cfg: RunConfig, out_dir: Path) -> Corpus:
    """The corpus saved under ``out_dir/corpus`` when present, else a fresh one."""
    root = out_dir / "corpus"
    if (root / "index.jsonl").exists():
        corpus = load_corpus(root)
        if corpus.seed != cfg.corpus.seed:
            raise DataError(f"corpus at {root} was made with seed {corpus.seed}, config says {cfg.corpus.seed}")
        return corpus
    return build_corpus(cfg)


def _records(cfg: RunConfig, out_dir: Path, corpus: Corpus):
    path = out_dir / "annotations.jsonl"
    if path.exists():
        return read_records(path)
    log.info("no annotations at %s; annotating with the mock client", path)
    report = run_annotation(corpus, MockClient.from_corpus(corpus), path, cfg.annotation)
    log.info("annotated %d items (%d quarantined)", report.written, report.quarantined)
    return read_records(path)


def _checkpoint_dir(out_dir: Path, stage) -> Path:
    return out_dir / "checkpoints" / f"stage{stage}"


def _load_state(cfg: RunConfig, root: Path) -> ModelState:
    return ModelState.load(root, cfg.model, cfg.vlfm)


def _latest_checkpoint(out_dir: Path, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    for name in ("final", "stage3", "joint", "stage2", "stage1"):
        root = out_dir / "checkpoints" / name
        if (root / "manifest.json").exists():
            return root
    raise PipelineOrderError(f"no checkpoint under {out_dir / 'checkpoints'}; run `vlffd train` first")


# -- subcommands -----------------------------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out_dir)
    target = out / ("cross_corpus" if args.cross else "corpus")
    corpus = build_corpus(cfg, cross=args.cross)
    index = save_corpus(corpus, target)
    print(f"wrote {len(corpus.videos())} videos to {target}")
    _write_manifest(out, "synth", argv, cfg, [index, target / "corpus.json"],
                    {"content_hash": corpus.content_hash()})
    return 0


def cmd_annotate(args, argv) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = _corpus(cfg, out)
    if args.client == "http":
        if not args.live_config:
            raise ConfigError("--client http needs --live-config with endpoint, model and auth_env")
        client = HttpClient(LiveClientConfig.load(args.live_config))
    else:
        client = MockClient.from_corpus(corpus)
    path = out / "annotations.jsonl"
    report = run_annotation(corpus, client, path, cfg.annotation)
    print(f"selected {report.selected}, written {report.written}, skipped {report.skipped}, "
          f"quarantined {report.quarantined}")
    _write_manifest(out, "annotate", argv, cfg, [path], {"report": vars(report), "generator": client.generator_id})
    return 0


def _train_stage(cfg: RunConfig, out: Path, stage: int) -> ModelState:
    corpus = _corpus(cfg, out)
    train_ids, _ = split_identities(len(corpus.groups), cfg.corpus.test_fraction, cfg.seed)
    if stage == 1:
        state = ModelState.create(cfg.model, cfg.vlfm, cfg.seed)
    else:
        prev = _checkpoint_dir(out, stage - 1)
        if not (prev / "manifest.json").exists():
            raise PipelineOrderError(f"stage {stage} needs the stage-{stage - 1} checkpoint at {prev}")
        state = _load_state(cfg, prev)
    if stage == 2:
        data = text_data(corpus, train_ids, _records(cfg, out, corpus), cfg)
    else:
        data = classification_data(corpus, train_ids, cfg, cfg.protocol)
        data.vocab = state.vocab
    result = run_stage(cfg.stages[stage], data, state, cfg.seed)
    print(f"stage {stage}: final loss {result.final_loss:.4f}")
    state.save(_checkpoint_dir(out, stage))
    return state


def cmd_train(args, argv) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.stage == "all":
        corpus = _corpus(cfg, out)
        result = run_experiment(cfg, corpus=corpus, records=_records(cfg, out, corpus))
        root = out / "checkpoints" / "final"
        result.state.save(root)
        for split, m in result.metrics.items():
            print(f"{split}: all {m['all']:.4f} average {m['average']:.4f}")
        (out / "metrics.json").write_text(json.dumps(result.metrics, indent=2, sort_keys=True))
        outputs = sorted(root.iterdir()) + [out / "metrics.json"]
        _write_manifest(out, "train", argv, cfg, outputs, {"run": result.manifest()})
        return 0
    stage = int(args.stage)
    if cfg.strategy != "three":
        raise ConfigError(f"--stage {stage} is only defined for the three-stage strategy; use --stage all")
    state = _train_stage(cfg, out, stage)
    root = _checkpoint_dir(out, stage)
    _write_manifest(out, f"train_stage{stage}", argv, cfg, sorted(root.iterdir()),
                    {"checkpoint_hashes": state.hashes()})
    return 0


def cmd_eval(args, argv) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out_dir)
    root = _latest_checkpoint(out, args.checkpoint)
    state = _load_state(cfg, root)
    corpus = _corpus(cfg, out)
    _, test_ids = split_identities(len(corpus.groups), cfg.corpus.test_fraction, cfg.seed)
    splits = ("intra", "cross") if args.split == "both" else (args.split or cfg.protocol,)
    metrics = {}
    for split in splits:
        ts = eval_set(corpus, test_ids, cfg) if split == "intra" else eval_set(build_corpus(cfg, cross=True), None, cfg)
        metrics[split] = evaluate(state, ts)
        metrics[split + "_detector"] = evaluate(state, ts, use_detector=True)
        print(f"{split}: " + " ".join(f"{k} {v:.4f}" for k, v in metrics[split].items()))
    if state.has("text_pathway"):
        g = grounding(state, corpus, test_ids, cfg)
        metrics["grounding"] = {"rate": g.rate, "hits": g.hits, "total": g.total}
        print(f"grounding: {g.hits}/{g.total}")
    path = out / "eval.json"
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True))
    _write_manifest(out, "eval", argv, cfg, [path], {"checkpoint": str(root)})
    return 0


def cmd_ablate(args, argv) -> int:
    if not args.grid:
        raise UsageError("ablate needs --grid")
    cfg = _resolve_config(args)
    out = Path(args.out_dir)
    grid = load_grid(args.grid)
    report = run_ablation(grid, cfg, progress=print)
    csv_path, manifest_path = report.write(out)
    print(report.csv_text(), end="")
    _write_manifest(out, "ablate", argv, cfg, [csv_path, manifest_path], {"grid": grid.name})
    return 0


def cmd_export_attn(args, argv) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out_dir)
    root = _latest_checkpoint(out, args.checkpoint)
    state = _load_state(cfg, root)
    state.require("text_pathway", "vlfm")
    corpus = _corpus(cfg, out)
    _, test_ids = split_identities(len(corpus.groups), cfg.corpus.test_fraction, cfg.seed)
    size, grid, margin = cfg.model.input_size, cfg.model.final_grid, cfg.sampling.test_margin
    target = out / "attention"
    target.mkdir(parents=True, exist_ok=True)
    written = []
    fakes = [v for g in corpus.groups if g.identity in test_ids for v in g.fakes.values()]
    for video in fakes[:args.count]:
        t = len(video) // 2
        x = Tensor(crop(video, t, margin, size)[None])
        with no_grad():
            f = detector_features(state, x)
            E_L, _ = text_features(state, x, f.pen if cfg.model.detector_to_text else None)
            raw = attention_map(f.E_C[0], E_L[0], state.params("vlfm"), state.vlfm_cfg, (grid, grid),
                                normalize=False)
        heat = normalize_map(raw)
        cell = argmax_cell(heat)
        stem = f"{video.video_id}_{t:04d}"
        pgm = target / f"{stem}.pgm"
        write_pgm16(pgm, heat)
        box = box_in_crop(video.artifact_boxes[t], video.face_boxes[t], margin, size)
        sidecar = target / f"{stem}.json"
        sidecar.write_text(json.dumps({
            "video_id": video.video_id, "frame_idx": t, "method": video.method, "region": video.region,
            "layer": state.vlfm_cfg.layers - 1, "direction": "text_to_img", "head_aggregation": "mean",
            "text_token_aggregation": "mean", "normalization": "min-max",
            "normalization_bounds": [float(raw.min()), float(raw.max())],
            "grid": [grid, grid], "argmax_cell": list(cell), "artifact_box_in_crop": [round(v, 3) for v in box],
            "hit": bool(cell_hits_box(cell, grid, size, box)), "checkpoint": str(root),
        }, indent=2))
        written += [pgm, sidecar]
    print(f"exported {len(written) // 2} attention maps to {target}")
    _write_manifest(out, "export-attn", argv, cfg, written)
    return 0


def cmd_validate(args, argv) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out_dir)
    problems = []
    if (out / "corpus" / "index.jsonl").exists():
        corpus = load_corpus(out / "corpus")
        print(f"corpus: {len(corpus.groups)} identities, {len(corpus.videos())} videos")
    path = out / "annotations.jsonl"
    if path.exists():
        records = read_records(path)
        for r in records:
            problems += [f"{r.video_id}/{r.frame_idx}: {p}" for p in validate_annotation(r)]
        print(f"annotations: {len(records)} records, {len(problems)} problems")
    for p in problems[:20]:
        print("  " + p)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "validate", argv, cfg, [], {"problems": problems})
    print("config ok" if not problems else "validation found problems")
    return 1 if problems else 0


# -- entry point --------------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (a manifest also works)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out-dir", default="runs/default", help="directory for all outputs")
    common.add_argument("--protocol", choices=("intra", "cross"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="vlffd", description="Toy vision-language face forgery detection pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--identities", type=int)
    p.add_argument("--cross", action="store_true", help="generate the held-out seed family instead")

    p = sub.add_parser("annotate", parents=[common], help="annotate selected frames")
    p.add_argument("--identities", type=int)
    p.add_argument("--client", choices=("mock", "http"), default="mock")
    p.add_argument("--live-config", help="JSON with endpoint, model, auth_env, rpm, max_retries")

    p = sub.add_parser("train", parents=[common], help="run one training stage or the whole plan")
    p.add_argument("--identities", type=int)
    p.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")

    p = sub.add_parser("eval", parents=[common], help="video-level AUC and grounding of a checkpoint")
    p.add_argument("--identities", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("intra", "cross", "both"))

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    p.add_argument("--grid", help="grid JSON path or bundled name (table4 to table8)")

    p = sub.add_parser("export-attn", parents=[common], help="write attention maps as 16-bit PGM")
    p.add_argument("--checkpoint")
    p.add_argument("--count", type=int, default=8)

    sub.add_parser("validate", parents=[common], help="check config, corpus and annotations")
    return parser


HANDLERS = {
    "synth": cmd_synth, "annotate": cmd_annotate, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "export-attn": cmd_export_attn, "validate": cmd_validate,
}


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(2, "UsageError", str(exc))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return HANDLERS[args.command](args, argv)
    except (ConfigError, UsageError) as exc:
        return _fail(2, type(exc).__name__, str(exc))
    except VlffdError as exc:
        return _fail(1, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
