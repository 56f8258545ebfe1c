"""Annotation data types and their validators."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources

QUESTION = "Is this image manipulated?"
REAL_WORD_LIMIT = 40
RECORD_FIELDS = ("video_id", "frame_idx", "label", "method", "question", "answer", "generator", "prompt_sha256")


@lru_cache(maxsize=None)
def load_data(name: str) -> dict:
    return json.loads(resources.files("vlffd.annotator").joinpath("data", name).read_text())


@dataclass(frozen=True)
class FramePair:
    identity: int
    method: int  # 1..4
    frame_index: int
    real_ref: str
    fake_ref: str

    @property
    def method_tag(self) -> str:
        return f"M{self.method}"


@dataclass(frozen=True)
class RealFrame:
    identity: int
    frame_index: int
    ref: str


@dataclass(frozen=True)
class MtsSummary:
    method: str
    description: str
    summary: str


@dataclass
class AnnotationRecord:
    video_id: str
    frame_idx: int
    label: str
    method: str
    question: str
    answer: str
    generator: str
    prompt_sha256: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        return cls(**{k: d[k] for k in RECORD_FIELDS})

    @property
    def key(self) -> tuple[str, int]:
        return (self.video_id, self.frame_idx)


def answer_body(answer: str) -> str:
    return re.sub(r"^(Yes|No),?\s*", "", answer.strip())


def validate_annotation(record: AnnotationRecord) -> list[str]:
    """Violations as short strings; an empty list means the record is valid."""
    problems = []
    answer = record.answer.strip()
    if not answer:
        problems.append("empty answer")
    expected = {"fake": "Yes,", "real": "No,"}.get(record.label)
    if expected is None:
        problems.append(f"unknown label {record.label!r}")
    elif not answer.startswith(expected):
        problems.append("prefix/label mismatch")
    if record.question != QUESTION:
        problems.append("question mismatch")
    if record.label == "fake" and record.method not in ("M1", "M2", "M3", "M4"):
        problems.append("method tag invalid for a fake record")
    if record.label == "real" and record.method != "none":
        problems.append("method tag invalid for a real record")
    if record.label == "real" and len(answer_body(answer).split()) > REAL_WORD_LIMIT:
        problems.append("word limit")
    if answer and not answer_body(answer):
        problems.append("empty answer")
    return problems


_SYMBOLS = set("=^_{}\\$<>|~")


def summary_violations(text: str) -> list[str]:
    problems = []
    s = text.strip()
    if not s:
        return ["empty summary"]
    if not s.endswith("."):
        problems.append("summary must end with a period")
    if re.search(r"[.!?](?=\s|$)", s[:-1]):
        problems.append("summary must be a single sentence")
    digits = sum(ch.isdigit() for ch in s)
    if digits > 0.05 * len(s) or any(ch in _SYMBOLS for ch in s):
        problems.append("summary contains technical notation")
    return problems
