"""End-to-end experiment: corpus -> annotations -> three training stages -> video AUC.

Protocols:

* ``intra``: every CE stage trains on real and manipulated frames of the
  training identities; evaluation uses the held-out identities of the same
  corpus.
* ``cross``: the CE stages (1 and 3) see only real frames and self-blended
  pseudo-fakes made from them; evaluation uses a corpus from a different seed
  family with weaker artifacts.

The text pathway (stage 2) always trains on the annotated real/fake frames of
the training identities.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .annotator.clients import MockClient
from .annotator.pipeline import annotate_corpus
from .annotator.records import AnnotationRecord
from .config import RunConfig, StageConfig
from .encoders import Vocabulary
from .evaluation import method_aucs, video_score
from .imaging import Box, crop_face, crop_window, to_unit
from .model import ModelState, group_rng
from .synth import Corpus, ToyVideo, generate_corpus, self_blend
from .tensor import Tensor, no_grad
from .training import (
    StageData, StageResult, detector_features, encode_answers, predict, run_stage, sample_frames, text_features,
)
from .vlfm import argmax_cell, attention_map, init_vlfm

log = logging.getLogger(__name__)


# -- corpora and splits ----------------------------------------------------------------------


def build_corpus(cfg: RunConfig, cross: bool = False) -> Corpus:
    c = cfg.corpus
    if cross:
        return generate_corpus(c.seed + c.cross_seed_offset, c.cross_identities, c.frames, c.frame_size,
                               c.cross_artifact_strength, c.max_truncation)
    return generate_corpus(c.seed, c.identities, c.frames, c.frame_size, c.artifact_strength, c.max_truncation)


def split_identities(n: int, test_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    order = np.random.default_rng([seed, 3]).permutation(n)
    n_test = max(1, int(round(test_fraction * n)))
    return sorted(order[n_test:].tolist()), sorted(order[:n_test].tolist())


def crop(video: ToyVideo, t: int, margin: float, size: int) -> np.ndarray:
    return to_unit(crop_face(video.frames[t], video.face_boxes[t], margin, size))


def _seed_of(*parts) -> list[int]:
    digest = hashlib.sha256(json.dumps(parts).encode()).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


# -- stage data -----------------------------------------------------------------------------------


def classification_data(corpus: Corpus, ids: list[int], cfg: RunConfig, protocol: str) -> StageData:
    """CE training frames: real+fake (intra) or real+self-blended (cross)."""
    size, policy = cfg.model.input_size, cfg.sampling
    images, labels, keys = [], [], []
    for group in (g for g in corpus.groups if g.identity in ids):
        if protocol == "intra":
            for video in group.videos():
                sel = sample_frames(video, policy, "train", _seed_of(cfg.seed, video.video_id))
                for t, m in zip(sel.indices, sel.margins):
                    images.append(crop(video, t, m, size))
                    labels.append(int(video.label == "fake"))
                    keys.append((video.video_id, t))
            continue
        real = group.real
        for copy in range(cfg.sbi_copies):
            sel = sample_frames(real, policy, "sbi", _seed_of(cfg.seed, real.video_id, copy))
            for t, m in zip(sel.indices, sel.margins):
                frame, box = real.frames[t], real.face_boxes[t]
                pseudo = self_blend(frame, box, _seed_of(cfg.seed, real.video_id, t, copy, "sbi"))
                images += [to_unit(crop_face(frame, box, m, size)), to_unit(crop_face(pseudo, box, m, size))]
                labels += [0, 1]
                keys += [(real.video_id, t), (real.video_id + "#sbi", t)]
    return StageData(np.stack(images), np.array(labels), keys)


def text_data(corpus: Corpus, ids: list[int], records: list[AnnotationRecord], cfg: RunConfig,
              vocab: Vocabulary | None = None) -> StageData:
    """Annotated frames of the given identities with answer-token targets."""
    size, policy = cfg.model.input_size, cfg.sampling
    videos = {v.video_id: v for g in corpus.groups if g.identity in ids for v in g.videos()}
    chosen = [r for r in records if r.video_id in videos]
    if vocab is None:
        vocab = Vocabulary.build(r.answer for r in chosen)
    rng = np.random.default_rng(_seed_of(cfg.seed, "text-margins"))
    margins = rng.uniform(*policy.train_margin, len(chosen))
    images = np.stack([crop(videos[r.video_id], r.frame_idx, m, size) for r, m in zip(chosen, margins)])
    targets, mask = encode_answers([r.answer for r in chosen], vocab, cfg.model.answer_len)
    labels = np.array([int(r.label == "fake") for r in chosen])
    return StageData(images, labels, [r.key for r in chosen], targets, mask, vocab)


def joint_data(cls_data: StageData, txt: StageData) -> StageData:
    """Union for the joint stage: SFT targets where annotations exist, CE everywhere."""
    A = txt.targets.shape[1]
    targets = np.concatenate([np.zeros((len(cls_data), A), dtype=np.int64), txt.targets])
    mask = np.concatenate([np.zeros((len(cls_data), A), dtype=bool), txt.target_mask])
    return StageData(np.concatenate([cls_data.images, txt.images]), np.concatenate([cls_data.labels, txt.labels]),
                     cls_data.keys + txt.keys, targets, mask, txt.vocab)


# -- evaluation ---------------------------------------------------------------------------------------


@dataclass
class EvalSet:
    images: np.ndarray
    frame_video: list[str]
    labels: dict[str, int]
    methods: dict[str, str]


def eval_set(corpus: Corpus, ids: list[int] | None, cfg: RunConfig) -> EvalSet:
    size, policy = cfg.model.input_size, cfg.sampling
    images, owner, labels, methods = [], [], {}, {}
    for group in corpus.groups:
        if ids is not None and group.identity not in ids:
            continue
        for video in group.videos():
            sel = sample_frames(video, policy, "test", 0)
            for t, m in zip(sel.indices, sel.margins):
                images.append(crop(video, t, m, size))
                owner.append(video.video_id)
            labels[video.video_id] = int(video.label == "fake")
            methods[video.video_id] = video.method
    return EvalSet(np.stack(images), owner, labels, methods)


def evaluate(state: ModelState, ts: EvalSet, use_detector: bool = False) -> dict[str, float]:
    """Per-method and overall video AUCs. Faces are one per frame here, so the
    multi-face max is the identity."""
    pred = predict(state, ts.images)
    scores = pred.detector_scores if use_detector or pred.scores is None else pred.scores
    per_video: dict[str, list[float]] = {}
    for vid, s in zip(ts.frame_video, scores):
        per_video.setdefault(vid, []).append(float(s))
    vs = {vid: video_score(s) for vid, s in per_video.items()}
    return method_aucs(vs, ts.labels, ts.methods)


def box_in_crop(box: Box, face_box: Box, margin: float, size: int) -> tuple[float, float, float, float]:
    """An image-space box mapped into crop pixel coordinates."""
    wy0, wx0, wy1, wx1 = crop_window(face_box, margin)
    sy, sx = size / (wy1 - wy0), size / (wx1 - wx0)
    y0, x0, y1, x1 = box
    return (y0 - wy0) * sy, (x0 - wx0) * sx, (y1 - wy0) * sy, (x1 - wx0) * sx


def cell_hits_box(cell: tuple[int, int], grid: int, size: int, box: tuple[float, float, float, float]) -> bool:
    step = size / grid
    r, c = cell
    y0, x0, y1, x1 = box
    return r * step < y1 and (r + 1) * step > y0 and c * step < x1 and (c + 1) * step > x0


@dataclass
class GroundingResult:
    rate: float
    hits: int
    total: int
    cells: list[tuple[str, int, tuple[int, int]]]


def grounding(state: ModelState, corpus: Corpus, ids: list[int], cfg: RunConfig, n_frames: int = 50,
              seed: int = 0) -> GroundingResult:
    """Share of held-out fake frames whose attention-map argmax cell overlaps the artifact box."""
    size, grid, margin = cfg.model.input_size, cfg.model.final_grid, cfg.sampling.test_margin
    candidates = [(v, t) for g in corpus.groups if g.identity in ids for v in g.fakes.values() for t in range(len(v))]
    rng = np.random.default_rng([seed, 50])
    picks = rng.choice(len(candidates), size=min(n_frames, len(candidates)), replace=False)
    hits, cells = 0, []
    for i in sorted(picks.tolist()):
        video, t = candidates[i]
        with no_grad():
            x = Tensor(crop(video, t, margin, size)[None])
            f = detector_features(state, x)
            E_L, _ = text_features(state, x, f.pen if cfg.model.detector_to_text else None)
            heat = attention_map(f.E_C[0], E_L[0], state.params("vlfm"), state.vlfm_cfg, (grid, grid))
        cell = argmax_cell(heat)
        box = box_in_crop(video.artifact_boxes[t], video.face_boxes[t], margin, size)
        hits += cell_hits_box(cell, grid, size, box)
        cells.append((video.video_id, t, cell))
    return GroundingResult(hits / len(cells), hits, len(cells), cells)


# -- runner ----------------------------------------------------------------------------------------------


@dataclass
class RunResult:
    config: RunConfig
    state: ModelState
    stages: list[StageResult]
    metrics: dict[str, dict[str, float]]
    train_ids: list[int]
    test_ids: list[int]
    timings: dict[str, float] = field(default_factory=dict)
    corpus: Corpus | None = None
    records: list[AnnotationRecord] | None = None

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "train_identities": self.train_ids,
            "test_identities": self.test_ids,
            "metrics": self.metrics,
            "checkpoint_hashes": self.state.hashes(),
            "stage_logs": {str(r.stage): [vars(e) for e in r.log] for r in self.stages},
            "timings": self.timings,
        }


def _stage_plan(cfg: RunConfig) -> list[StageConfig]:
    s = cfg.stages
    if cfg.strategy == "three":
        return [s[1], s[2], s[3]]
    joint_epochs = s[3].epochs
    if cfg.strategy == "two":
        joint = StageConfig(stage="joint", epochs=joint_epochs, batch_size=s[3].batch_size, lr=s[3].lr,
                            trainable=("text_pathway", "vlfm"), loss="CE+SFT", decay="linear",
                            decay_start=s[3].decay_start)
        return [s[1], joint]
    joint = StageConfig(stage="joint", epochs=joint_epochs, batch_size=s[3].batch_size, lr=s[3].lr,
                        trainable=("detector", "text_pathway", "vlfm"), loss="CE+SFT", decay="linear",
                        decay_start=s[3].decay_start)
    return [joint]


def stage_key(cfg: RunConfig, upto: int) -> str:
    """Hash of everything that determines the checkpoint after the first ``upto`` planned stages."""
    d = cfg.to_dict()
    relevant = {k: d[k] for k in ("seed", "protocol", "corpus", "sampling", "model", "strategy", "sbi_copies")}
    if upto >= 2 or cfg.strategy != "three":
        relevant["annotation"] = d["annotation"]
    if upto >= 3 or cfg.strategy != "three":
        relevant["vlfm"] = d["vlfm"]
    relevant["stages"] = [vars(sc) for sc in _stage_plan(cfg)[:upto]]
    return hashlib.sha256(json.dumps(relevant, sort_keys=True, default=list).encode()).hexdigest()


def run_experiment(cfg: RunConfig, corpus: Corpus | None = None, cross_corpus: Corpus | None = None,
                   records: list[AnnotationRecord] | None = None, cache: dict | None = None,
                   splits: tuple[str, ...] | None = None,
                   progress: Callable[[str], None] | None = None) -> RunResult:
    """Train under ``cfg`` and report AUCs on the protocol's evaluation split(s).

    ``cache`` (keyed by :func:`stage_key`) lets ablation grids reuse stage
    checkpoints shared between cells.
    """
    cfg.validate()
    t0 = time.perf_counter()
    timings: dict[str, float] = {}
    say = progress or (lambda msg: log.info(msg))
    corpus = corpus or build_corpus(cfg)
    train_ids, test_ids = split_identities(len(corpus.groups), cfg.corpus.test_fraction, cfg.seed)
    if records is None:
        records, failures = annotate_corpus(corpus, MockClient.from_corpus(corpus), cfg.annotation)
        if failures:
            log.warning("%d annotation items quarantined", len(failures))
    timings["data"] = time.perf_counter() - t0

    cls_data = classification_data(corpus, train_ids, cfg, cfg.protocol)
    txt_data = text_data(corpus, train_ids, records, cfg)
    state = ModelState.create(cfg.model, cfg.vlfm, cfg.seed)
    results: list[StageResult] = []
    for i, sc in enumerate(_stage_plan(cfg), start=1):
        key = stage_key(cfg, i)
        if cache is not None and key in cache:
            state = cache[key].clone()
            if "vlfm" not in sc.trainable and 3 not in state.completed:
                # fusion weights are not trained yet; size them for this cell
                state.vlfm_cfg = cfg.vlfm
                state.groups["vlfm"] = init_vlfm(cfg.model.d, cfg.vlfm, group_rng(cfg.seed, "vlfm"))
            say(f"stage {sc.stage}: reused cached checkpoint")
            continue
        ts = time.perf_counter()
        if sc.stage == 2:
            data = txt_data
        elif sc.stage == "joint":
            data = joint_data(cls_data, txt_data)
        else:
            data = cls_data
            if sc.stage == 3 and data.vocab is None:
                data.vocab = txt_data.vocab
        results.append(run_stage(sc, data, state, cfg.seed))
        timings[f"stage{sc.stage}"] = time.perf_counter() - ts
        say(f"stage {sc.stage}: final loss {results[-1].final_loss:.4f} ({timings[f'stage{sc.stage}']:.1f}s)")
        if cache is not None:
            cache[key] = state.clone()

    te = time.perf_counter()
    if splits is None:
        splits = ("intra",) if cfg.protocol == "intra" else ("cross",)
    metrics = {}
    for split in splits:
        if split == "intra":
            ts_ = eval_set(corpus, test_ids, cfg)
        else:
            cross_corpus = cross_corpus or build_corpus(cfg, cross=True)
            ts_ = eval_set(cross_corpus, None, cfg)
        metrics[split] = evaluate(state, ts_)
        metrics[split + "_detector"] = evaluate(state, ts_, use_detector=True)
    timings["eval"] = time.perf_counter() - te
    timings["total"] = time.perf_counter() - t0
    return RunResult(cfg, state, results, metrics, train_ids, test_ids, timings, corpus, records)
