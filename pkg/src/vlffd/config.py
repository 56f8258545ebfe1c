"""Dataclass configuration for corpus, model, stages and whole runs.

Defaults are desk-scale. Values carried over verbatim from the full-scale
recipe live in ``FULL_SCALE_STAGE1`` and in the ``lora_*`` echo fields.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

GROUPS = ("detector", "text_pathway", "vlfm")
FUSION_MODES = ("elementwise_product", "addition", "concatenation")


@dataclass
class CorpusConfig:
    identities: int = 20
    frames: int = 32
    frame_size: int = 40
    seed: int = 7
    max_truncation: int = 3
    artifact_strength: float = 1.0
    # held-out "cross" family: different master seed, weaker artifacts
    cross_seed_offset: int = 1000
    cross_identities: int = 10
    cross_artifact_strength: float = 0.7
    test_fraction: float = 0.3


DETECTOR_POOLS = ("mean", "max", "mean_max")


@dataclass
class ModelConfig:
    input_size: int = 32
    stage_channels: tuple[int, int] = (8, 16)
    d: int = 32
    d_v: int = 32
    d_t: int = 32
    patch: int = 8
    n_l: int = 8
    question_len: int = 4
    answer_len: int = 8
    mixer_layers: int = 2
    mixer_hidden: int = 64
    # when False, projected detector tokens are left out of the text sequence
    detector_to_text: bool = True
    # pooling of the final detector map before the head: "mean", "max" or "mean_max"
    detector_pool: str = "max"

    def validate(self) -> None:
        if self.detector_pool not in DETECTOR_POOLS:
            raise ConfigError(f"detector_pool must be one of {DETECTOR_POOLS}")
        if self.input_size % 8:
            raise ConfigError("input_size must be divisible by 8 (three stride-2 stages)")
        if self.input_size % self.patch:
            raise ConfigError("input_size must be divisible by the patch size")
        if self.d_t != self.d:
            raise ConfigError(f"text width d_t={self.d_t} must equal fusion width d={self.d}")
        if self.n_l > self.question_len + self.answer_len:
            raise ConfigError("n_l cannot exceed the number of prompt positions")

    @property
    def final_grid(self) -> int:
        return self.input_size // 8


@dataclass
class VlfmConfig:
    layers: int = 2
    n_heads: int = 4
    fusion_mode: str = "elementwise_product"
    img_to_text: bool = True
    text_to_img: bool = True
    mlp_ratio: int = 4

    def validate(self, d: int) -> None:
        if self.layers < 1 or self.n_heads < 1:
            raise ConfigError("VLFM needs layers >= 1 and n_heads >= 1")
        if d % self.n_heads:
            raise ConfigError(f"d={d} is not divisible by n_heads={self.n_heads}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")


@dataclass
class StageConfig:
    stage: int | str
    epochs: int
    batch_size: int
    lr: float
    trainable: tuple[str, ...]
    loss: str
    decay: str = "linear"
    decay_start: int = 0
    weight_decay: float = 0.01
    grad_accum_steps: int = 1
    # random horizontal flips and colour-channel permutations of detector inputs
    augment: bool = False
    lora_rank: int | None = None
    lora_alpha: int | None = None

    @property
    def frozen(self) -> tuple[str, ...]:
        return tuple(g for g in GROUPS if g not in self.trainable)

    def validate(self) -> None:
        if any(g not in GROUPS for g in self.trainable):
            raise ConfigError(f"unknown parameter group in {self.trainable}")
        canonical = {1: ("detector",), 2: ("text_pathway",), 3: ("vlfm",)}
        if self.stage in canonical and tuple(self.trainable) != canonical[self.stage]:
            raise ConfigError(f"stage {self.stage} must train exactly {canonical[self.stage]}")
        if self.stage not in canonical and self.stage != "joint":
            raise ConfigError(f"unknown stage id {self.stage!r}")
        if self.loss not in ("CE", "SFT", "CE+SFT"):
            raise ConfigError(f"unknown loss kind {self.loss!r}")
        if self.decay not in ("linear", "cosine", "none"):
            raise ConfigError(f"unknown decay policy {self.decay!r}")
        if self.decay_start > self.epochs:
            raise ConfigError(f"decay start {self.decay_start} exceeds total epochs {self.epochs}")
        if self.epochs < 1 or self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ConfigError("epochs, batch size and accumulation steps must be positive")


# Stage-1 settings of the full-scale recipe; used to check the schedule.
FULL_SCALE_STAGE1 = StageConfig(
    stage=1, epochs=200, batch_size=64, lr=5e-5, trainable=("detector",), loss="CE",
    decay="linear", decay_start=100,
)


def default_stages() -> dict[int, StageConfig]:
    return {
        1: StageConfig(stage=1, epochs=80, batch_size=32, lr=3e-3, trainable=("detector",),
                       loss="CE", decay="linear", decay_start=40, augment=True),
        2: StageConfig(stage=2, epochs=12, batch_size=32, lr=3e-3, trainable=("text_pathway",),
                       loss="SFT", decay="cosine", decay_start=0, lora_rank=128, lora_alpha=256),
        3: StageConfig(stage=3, epochs=30, batch_size=32, lr=3e-3, trainable=("vlfm",),
                       loss="CE", decay="linear", decay_start=15),
    }


@dataclass
class SamplingPolicy:
    real_frames: int = 32
    fake_frames: int = 8
    sbi_real_frames: int = 8
    test_frames: int = 32
    train_margin: tuple[float, float] = (0.04, 0.20)
    test_margin: float = 0.125


@dataclass
class AnnotationConfig:
    pairs_per_method: int = 8
    use_cfad: bool = True
    use_mts: bool = True
    max_retries: int = 3
    parallelism: int = 1


@dataclass
class RunConfig:
    seed: int = 7
    protocol: str = "intra"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    vlfm: VlfmConfig = field(default_factory=VlfmConfig)
    stages: dict[int, StageConfig] = field(default_factory=default_stages)
    sampling: SamplingPolicy = field(default_factory=SamplingPolicy)
    annotation: AnnotationConfig = field(default_factory=AnnotationConfig)
    # "three" (default, staged), "two" (detector then joint) or "one" (all jointly)
    strategy: str = "three"
    sbi_copies: int = 16

    def validate(self) -> None:
        if self.protocol not in ("cross", "intra"):
            raise ConfigError(f"protocol must be 'cross' or 'intra', got {self.protocol!r}")
        if self.strategy not in ("one", "two", "three"):
            raise ConfigError(f"unknown training strategy {self.strategy!r}")
        self.model.validate()
        self.vlfm.validate(self.model.d)
        for sc in self.stages.values():
            sc.validate()

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["stages"] = {str(k): v for k, v in d["stages"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        d = copy.deepcopy(d)
        cfg = cls()
        for key, sub in (("corpus", CorpusConfig), ("model", ModelConfig), ("vlfm", VlfmConfig),
                         ("sampling", SamplingPolicy), ("annotation", AnnotationConfig)):
            if key in d:
                setattr(cfg, key, _build(sub, d.pop(key), getattr(cfg, key)))
        if "stages" in d:
            stages = default_stages()
            for k, v in d.pop("stages").items():
                k = int(k)
                stages[k] = _build(StageConfig, v, stages.get(k))
            cfg.stages = stages
        for k, v in d.items():
            if not hasattr(cfg, k):
                raise ConfigError(f"unknown run config key {k!r}")
            setattr(cfg, k, v)
        return cfg

    def with_overrides(self, delta: dict[str, Any]) -> "RunConfig":
        """Apply a nested config delta such as ``{"vlfm": {"layers": 3}}``."""
        merged = _deep_merge(self.to_dict(), delta)
        return RunConfig.from_dict(merged)


def _build(cls, values: dict[str, Any], base=None):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = dataclasses.asdict(base) if base is not None else {}
    merged.update(values)
    for f in dataclasses.fields(cls):
        v = merged.get(f.name)
        if isinstance(v, list) and "tuple" in str(f.type):
            merged[f.name] = tuple(v)
    return cls(**merged)


def _deep_merge(base: dict, delta: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in delta.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    # manifests embed the config under "config"
    if "config" in raw and isinstance(raw["config"], dict):
        raw = raw["config"]
    return RunConfig.from_dict(raw)
