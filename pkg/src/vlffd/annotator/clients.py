"""Language-model clients: a deterministic corpus-aware mock and a generic HTTP client."""

from __future__ import annotations

import base64
import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx

from ..errors import ConfigError, UpstreamError
from .records import load_data


class LLMClient(Protocol):
    generator_id: str

    def complete(self, prompt: str, images: Sequence[str] = ()) -> str:
        ...


@dataclass(frozen=True)
class FrameInfo:
    label: str
    method: str
    region: str | None


ARTIFACT_PHRASES = {
    "M1": "a patch with mismatched skin tone and a visible seam",
    "M2": "bent lip contours and smeared texture",
    "M3": "a flat rectangular block with unnatural colour",
    "M4": "blurred texture with an odd colour cast",
}

_REAL_TEMPLATES = (
    "The face shows natural skin texture, consistent lighting and coherent facial features.",
    "The image shows an intact face with even skin detail and sharp, consistent edges around the eyes and mouth.",
    "This face has uniform texture and natural colour, with no seams, blur or distorted features.",
)


def paraphrase(summary: str) -> str:
    s = summary.strip()
    m = re.match(r"This technique\s+(.*)", s)
    if m:
        return f"It looks like a method that {m.group(1)}"
    return f"It looks like the following method was used: {s[0].lower()}{s[1:]}"


def _stable_index(key: str, n: int) -> int:
    return int(hashlib.sha256(key.encode()).hexdigest(), 16) % n


class MockClient:
    """Template answers computed from corpus metadata; never calls out.

    With two attached images (real first) it names the manipulated region; with
    one fake image it can only describe the artifacts generically. A technique
    summary embedded in the prompt is paraphrased into the answer.
    """

    generator_id = "mock"

    def __init__(self, frames: dict[str, FrameInfo]):
        self.frames = frames
        self.techniques = load_data("techniques.json")["techniques"]

    @classmethod
    def from_corpus(cls, corpus) -> "MockClient":
        frames = {}
        for video in corpus.videos():
            info = FrameInfo(video.label, video.method, video.region)
            for t in range(len(video)):
                frames[f"{video.video_id}/{t:04d}"] = info
        return cls(frames)

    def complete(self, prompt: str, images: Sequence[str] = ()) -> str:
        tag = re.search(r"official description of the (M[1-4])", prompt)
        if tag:
            return self.techniques[tag.group(1)]["summary"]
        if not images:
            raise UpstreamError("mock client needs at least one image reference")
        info = self.frames.get(images[-1])
        if info is None:
            raise UpstreamError(f"unknown image reference {images[-1]!r}")
        if info.label == "real":
            return _REAL_TEMPLATES[_stable_index(images[-1], len(_REAL_TEMPLATES))]
        phrase = ARTIFACT_PHRASES[info.method]
        if len(images) >= 2 and info.region:
            text = f"The {info.region} area shows {phrase}."
        else:
            text = "The face shows subtle inconsistencies in texture and colour."
        summary = re.search(r"Manipulation technique: (.+)", prompt)
        if summary:
            text += " " + paraphrase(summary.group(1).strip())
        return text


class TokenBucket:
    """Blocking rate limiter: ``rpm`` requests per minute with a burst of ``burst``."""

    def __init__(self, rpm: float, burst: int = 1, clock=time.monotonic, sleep=time.sleep):
        if rpm <= 0:
            raise ConfigError("requests per minute must be positive")
        self.rate = rpm / 60.0
        self.capacity = float(burst)
        self.tokens = float(burst)
        self.clock, self.sleep = clock, sleep
        self.updated = clock()
        self.lock = threading.Lock()

    def acquire(self) -> None:
        with self.lock:
            while True:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                self.sleep((1.0 - self.tokens) / self.rate)


@dataclass
class LiveClientConfig:
    endpoint: str
    auth_env: str
    model: str
    rpm: float = 30.0
    max_retries: int = 3
    backoff_base: float = 1.0
    timeout: float = 60.0

    @classmethod
    def load(cls, path: str | Path) -> "LiveClientConfig":
        raw = json.loads(Path(path).read_text())
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"bad live-client config {path}: {exc}") from exc


class HttpClient:
    """POSTs ``{"model", "prompt", "images"}`` as JSON and reads ``{"text"}`` back.

    Images are sent as references plus base64 PPM bytes when an image loader is
    supplied. Failures back off exponentially up to ``max_retries`` retries.
    """

    def __init__(self, config: LiveClientConfig, image_loader: Callable[[str], bytes] | None = None,
                 transport: httpx.BaseTransport | None = None, sleep=time.sleep):
        token = os.environ.get(config.auth_env)
        if not token:
            raise ConfigError(f"environment variable {config.auth_env} holds no auth token")
        self.config = config
        self.generator_id = f"http:{config.model}"
        self.image_loader = image_loader
        self.sleep = sleep
        self.bucket = TokenBucket(config.rpm, sleep=sleep)
        self.http = httpx.Client(transport=transport, timeout=config.timeout,
                                 headers={"Authorization": f"Bearer {token}"})

    def _payload(self, prompt: str, images: Sequence[str]) -> dict:
        items = []
        for ref in images:
            item = {"ref": ref}
            if self.image_loader is not None:
                item["ppm_base64"] = base64.b64encode(self.image_loader(ref)).decode()
            items.append(item)
        return {"model": self.config.model, "prompt": prompt, "images": items}

    def complete(self, prompt: str, images: Sequence[str] = ()) -> str:
        payload = self._payload(prompt, images)
        transcript = []
        for attempt in range(self.config.max_retries + 1):
            self.bucket.acquire()
            try:
                resp = self.http.post(self.config.endpoint, json=payload)
                transcript.append({"attempt": attempt, "status": resp.status_code})
                if resp.status_code == 200:
                    text = resp.json().get("text")
                    if isinstance(text, str):
                        return text
                    transcript[-1]["error"] = "response lacks a text field"
            except (httpx.HTTPError, ValueError) as exc:
                transcript.append({"attempt": attempt, "error": str(exc)})
            if attempt < self.config.max_retries:
                self.sleep(self.config.backoff_base * 2**attempt)
        raise UpstreamError(f"{self.config.endpoint} failed after {self.config.max_retries + 1} attempts",
                            transcript)
