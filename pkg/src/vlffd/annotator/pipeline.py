"""Frame pairing, prompt assembly, technique summaries and the annotation run loop."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ..config import AnnotationConfig
from ..errors import ContractError, DataError, UpstreamError
from ..synth import METHODS, Corpus, ToyVideo, even_indices
from .clients import LLMClient
from .records import (
    QUESTION, AnnotationRecord, FramePair, MtsSummary, RealFrame, answer_body, load_data,
    summary_violations, validate_annotation,
)

log = logging.getLogger(__name__)


def frame_ref(video_id: str, t: int) -> str:
    return f"{video_id}/{t:04d}"


def parse_ref(ref: str) -> tuple[str, int]:
    video_id, t = ref.rsplit("/", 1)
    return video_id, int(t)


# -- pairing ------------------------------------------------------------------------


def pair_indices(lengths: Sequence[int], K: int) -> list[int]:
    t_min = min(lengths)
    if K > t_min:
        warnings.warn(f"K={K} exceeds the shortest video ({t_min} frames); clamping", stacklevel=3)
    return even_indices(t_min, K)


def pair_frames(real: ToyVideo, fakes: Sequence[ToyVideo], K: int) -> list[FramePair]:
    """Pairs (real frame, fake frame) at indices shared by all five videos."""
    if len(fakes) != 4:
        raise DataError(f"expected four manipulated videos, got {len(fakes)}")
    for f in fakes:
        if f.identity != real.identity:
            raise DataError(f"{f.video_id} belongs to identity {f.identity}, not {real.identity}")
    indices = pair_indices([len(real)] + [len(f) for f in fakes], K)
    pairs = []
    for fake in sorted(fakes, key=lambda v: v.method):
        j = METHODS.index(fake.method) + 1
        for t in indices:
            pairs.append(FramePair(real.identity, j, t, frame_ref(real.video_id, t), frame_ref(fake.video_id, t)))
    return pairs


# -- prompts ------------------------------------------------------------------------------


@dataclass(frozen=True)
class Prompt:
    text: str
    images: tuple[str, ...]

    @property
    def sha256(self) -> str:
        payload = self.text + "\n" + "\n".join(self.images)
        return hashlib.sha256(payload.encode()).hexdigest()


def build_real_prompt() -> str:
    return load_data("prompts.json")["real"]


def build_cfad_prompt(pair: FramePair, summary: MtsSummary | None, use_cfad: bool = True) -> Prompt:
    """Prompt for a fake frame; ``summary=None`` drops the technique block."""
    p = load_data("prompts.json")
    if summary is not None and summary.method != pair.method_tag:
        raise ContractError(f"summary for {summary.method} attached to a {pair.method_tag} pair")
    if use_cfad:
        parts = [p["contrastive_intro"].format(real_ref=pair.real_ref, fake_ref=pair.fake_ref), p["contrastive_task"]]
        images = (pair.real_ref, pair.fake_ref)
    else:
        parts = [p["single_intro"].format(fake_ref=pair.fake_ref), p["single_task"]]
        images = (pair.fake_ref,)
    if summary is not None:
        parts += [p["technique"].format(summary=summary.summary), p["paraphrase"]]
    parts.append(p["format"])
    return Prompt("\n".join(parts), images)


def real_prompt(frame: RealFrame) -> Prompt:
    return Prompt(build_real_prompt(), (frame.ref,))


# -- technique summaries ---------------------------------------------------------------------


def technique_descriptions(path: str | Path | None = None) -> dict[str, str]:
    raw = json.loads(Path(path).read_text()) if path else load_data("techniques.json")
    return {tag: entry["description"] for tag, entry in raw["techniques"].items()}


def summarize_technique(tag: str, description: str, client: LLMClient, retries: int = 3) -> MtsSummary:
    if not description.strip():
        raise DataError(f"empty description for {tag}")
    prompt = load_data("prompts.json")["summarize"].format(tag=tag, description=description)
    transcript = []
    for attempt in range(retries + 1):
        text = client.complete(prompt).strip()
        problems = summary_violations(text)
        if not problems:
            return MtsSummary(tag, description, text)
        transcript.append({"attempt": attempt, "response": text, "violations": problems})
    raise UpstreamError(f"no valid summary for {tag} after {retries + 1} attempts", transcript)


def summarize_all(client: LLMClient, retries: int = 3, path: str | Path | None = None) -> dict[str, MtsSummary]:
    return {tag: summarize_technique(tag, desc, client, retries)
            for tag, desc in sorted(technique_descriptions(path).items())}


# -- annotation ----------------------------------------------------------------------------------


def apply_prefix(response: str, label: str) -> str:
    body = answer_body(response)
    if body:
        body = body[0].lower() + body[1:]
    return ("Yes, " if label == "fake" else "No, ") + body


class AnnotationFailure(Exception):
    def __init__(self, key: tuple[str, int], reason: str, transcript: list):
        super().__init__(reason)
        self.key, self.reason, self.transcript = key, reason, transcript


def annotate(item: FramePair | RealFrame, client: LLMClient, summaries: dict[str, MtsSummary] | None = None,
             use_cfad: bool = True, retries: int = 3) -> AnnotationRecord:
    """One validated record for a fake pair or a real frame.

    Responses failing validation are retried; the final failure raises
    ``AnnotationFailure`` so the caller can quarantine the item.
    """
    if isinstance(item, FramePair):
        summary = summaries.get(item.method_tag) if summaries else None
        prompt = build_cfad_prompt(item, summary, use_cfad)
        video_id, t = parse_ref(item.fake_ref)
        label, method = "fake", item.method_tag
    else:
        prompt = real_prompt(item)
        video_id, t = parse_ref(item.ref)
        label, method = "real", "none"
    transcript = []
    for attempt in range(retries + 1):
        try:
            response = client.complete(prompt.text, prompt.images)
        except UpstreamError as exc:
            transcript.append({"attempt": attempt, "error": str(exc), "upstream": exc.transcript})
            continue
        record = AnnotationRecord(video_id, t, label, method, QUESTION, apply_prefix(response, label),
                                  client.generator_id, prompt.sha256)
        problems = validate_annotation(record)
        if not problems:
            return record
        transcript.append({"attempt": attempt, "response": response, "violations": problems})
    raise AnnotationFailure((video_id, t), "validation failed after retries", transcript)


def corpus_items(corpus: Corpus, K: int) -> list[FramePair | RealFrame]:
    """Per identity: the K real frames, then 4K fake pairs, in corpus order."""
    items: list[FramePair | RealFrame] = []
    for group in corpus.groups:
        fakes = [group.fakes[m] for m in METHODS]
        pairs = pair_frames(group.real, fakes, K)
        for t in sorted({p.frame_index for p in pairs}):
            items.append(RealFrame(group.identity, t, frame_ref(group.real.video_id, t)))
        items.extend(pairs)
    return items


def _item_key(item: FramePair | RealFrame) -> tuple[str, int]:
    return parse_ref(item.fake_ref if isinstance(item, FramePair) else item.ref)


def _read_keys(path: Path) -> set[tuple[str, int]]:
    keys = set()
    if path.exists():
        for line in path.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                keys.add((rec["video_id"], rec["frame_idx"]))
    return keys


def read_records(path: str | Path) -> list[AnnotationRecord]:
    path = Path(path)
    if not path.exists():
        return []
    return [AnnotationRecord.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]


@dataclass
class AnnotationReport:
    selected: int
    written: int
    skipped: int
    quarantined: int
    summaries: dict[str, str]


def run_annotation(corpus: Corpus, client: LLMClient, out_path: str | Path, cfg: AnnotationConfig | None = None,
                   quarantine_path: str | Path | None = None, descriptions: str | Path | None = None) -> AnnotationReport:
    """Annotate every selected frame, appending to ``out_path``.

    Keys already present in the output or quarantine files are skipped, so a
    rerun on a finished corpus writes nothing.
    """
    cfg = cfg or AnnotationConfig()
    out_path = Path(out_path)
    quarantine_path = Path(quarantine_path) if quarantine_path else out_path.with_suffix(".quarantine.jsonl")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    items = corpus_items(corpus, cfg.pairs_per_method)
    done = _read_keys(out_path) | _read_keys(quarantine_path)
    todo = [it for it in items if _item_key(it) not in done]
    summaries = summarize_all(client, cfg.max_retries, descriptions) if cfg.use_mts and todo else {}

    def work(item):
        try:
            return annotate(item, client, summaries, cfg.use_cfad, cfg.max_retries)
        except AnnotationFailure as exc:
            return exc

    written = quarantined = 0
    with ThreadPoolExecutor(max_workers=max(1, cfg.parallelism)) as pool, \
            out_path.open("a") as out, quarantine_path.open("a") as quarantine:
        # map preserves input order, so the single writer here is deterministic
        for result in pool.map(work, todo):
            if isinstance(result, AnnotationFailure):
                quarantine.write(json.dumps({"video_id": result.key[0], "frame_idx": result.key[1],
                                             "reason": result.reason, "transcript": result.transcript}) + "\n")
                quarantined += 1
            else:
                out.write(result.to_json() + "\n")
                written += 1
    log.info("annotation: %d selected, %d written, %d skipped, %d quarantined",
             len(items), written, len(items) - len(todo), quarantined)
    return AnnotationReport(len(items), written, len(items) - len(todo), quarantined,
                            {k: v.summary for k, v in summaries.items()})


def annotate_corpus(corpus: Corpus, client: LLMClient, cfg: AnnotationConfig | None = None
                    ) -> tuple[list[AnnotationRecord], list[AnnotationFailure]]:
    """In-memory variant of :func:`run_annotation` (no resume files)."""
    cfg = cfg or AnnotationConfig()
    items = corpus_items(corpus, cfg.pairs_per_method)
    summaries = summarize_all(client, cfg.max_retries) if cfg.use_mts else {}
    records, failures = [], []
    for item in items:
        try:
            records.append(annotate(item, client, summaries, cfg.use_cfad, cfg.max_retries))
        except AnnotationFailure as exc:
            failures.append(exc)
    return records, failures


def records_by_key(records: Iterable[AnnotationRecord]) -> dict[tuple[str, int], AnnotationRecord]:
    return {r.key: r for r in records}
