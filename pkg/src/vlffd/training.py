"""Staged training: schedules, frame sampling, losses, AdamW and the stage runner.

Stage 1 trains the detector with CE, stage 2 the text pathway with the SFT
loss, stage 3 the fusion module with CE. Groups a stage does not train are
frozen: their features are precomputed without a graph and their serialized
bytes are checked to be unchanged when the stage ends. The ``"joint"`` stage
trains any set of groups end to end with CE + SFT (one- and two-stage
strategies).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import SamplingPolicy, StageConfig
from .encoders import PAD, Vocabulary, detect_features, encode_image_tokens, flatten_spatial, text_pathway_forward
from .errors import ConfigError, ContractError, DataError, DivergenceError, PipelineOrderError
from .model import ModelState, group_hash
from .synth import ToyVideo, even_indices
from .tensor import Tensor, backward, cross_entropy, no_grad
from .vlfm import vlfm_forward

log = logging.getLogger(__name__)

PREREQUISITES = {1: (), 2: (1,), 3: (1, 2)}
STAGE_IDS = {1: 1, 2: 2, 3: 3, "joint": 4}


# -- schedule and sampling ---------------------------------------------------------------------


def lr_schedule(epoch: int, cfg: StageConfig) -> float:
    """Constant until ``decay_start``, then linear (or cosine) decay reaching 0 at ``epochs``."""
    if cfg.decay_start > cfg.epochs:
        raise ConfigError(f"decay start {cfg.decay_start} exceeds total epochs {cfg.epochs}")
    if not 0 <= epoch <= cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if cfg.decay == "none" or epoch < cfg.decay_start:
        return cfg.lr
    span = cfg.epochs - cfg.decay_start
    frac = (epoch - cfg.decay_start) / span if span else 1.0
    if cfg.decay == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    return cfg.lr * (1.0 - frac)


@dataclass(frozen=True)
class FrameSelection:
    indices: list[int]
    margins: list[float]


def frames_requested(video: ToyVideo, policy: SamplingPolicy, split: str) -> int:
    if split == "test":
        return policy.test_frames
    if split == "sbi":
        return policy.sbi_real_frames
    if split == "train":
        return policy.real_frames if video.label == "real" else policy.fake_frames
    raise ConfigError(f"unknown split {split!r}")


def sample_frames(video: ToyVideo, policy: SamplingPolicy, split: str, seed) -> FrameSelection:
    """Evenly spaced frame indices plus a crop margin per frame."""
    if len(video) == 0:
        raise DataError(f"{video.video_id} has no frames")
    indices = even_indices(len(video), frames_requested(video, policy, split))
    if split == "test":
        margins = [policy.test_margin] * len(indices)
    else:
        rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 5])
        lo, hi = policy.train_margin
        margins = rng.uniform(lo, hi, len(indices)).tolist()
    return FrameSelection(indices, margins)


# -- losses and optimizer ---------------------------------------------------------------------


def sft_loss(token_logits: Tensor, target_tokens, mask) -> Tensor:
    """Mean token cross-entropy over the masked answer positions."""
    return cross_entropy(token_logits, target_tokens, mask)


class AdamW:
    """Adam with decoupled weight decay (applied to matrices, not biases)."""

    def __init__(self, params: list[Tensor], weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.wd, self.b1, self.b2, self.eps = weight_decay, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float, scale: float = 1.0) -> None:
        self.t += 1
        c1, c2 = 1.0 - self.b1 ** self.t, 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if p.ndim > 1:
                update = update + self.wd * p.data
            p.data = p.data - lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- data -----------------------------------------------------------------------------------------


@dataclass
class StageData:
    """Cropped frames (unit range) with labels and optional answer-token targets."""

    images: np.ndarray
    labels: np.ndarray
    keys: list[tuple[str, int]]
    targets: np.ndarray | None = None
    target_mask: np.ndarray | None = None
    vocab: Vocabulary | None = None

    def __post_init__(self):
        if len(self.images) == 0:
            raise DataError("stage data is empty")
        if not (len(self.images) == len(self.labels) == len(self.keys)):
            raise DataError("images, labels and keys differ in length")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def has_text(self) -> bool:
        return self.targets is not None

    def subset(self, idx) -> "StageData":
        idx = np.asarray(idx)
        return StageData(self.images[idx], self.labels[idx], [self.keys[i] for i in idx],
                         None if self.targets is None else self.targets[idx],
                         None if self.target_mask is None else self.target_mask[idx], self.vocab)


def encode_answers(answers: list[str], vocab: Vocabulary, length: int) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array([vocab.encode(a, length) for a in answers], dtype=np.int64)
    return ids, ids != vocab.index[PAD]


# -- forwards -------------------------------------------------------------------------------------


@dataclass
class Features:
    pen: Tensor        # (B, n_pen, c_pen) flattened penultimate tokens
    E_C: Tensor        # (B, n_c, d)
    det_logits: Tensor


def detector_features(state: ModelState, images) -> Features:
    pen, final, logits = detect_features(images, state.params("detector"), state.model_cfg)
    return Features(flatten_spatial(pen), flatten_spatial(final), logits)


def text_features(state: ModelState, images, pen: Tensor) -> tuple[Tensor, Tensor]:
    tp = state.params("text_pathway")
    E_V = encode_image_tokens(images, tp, state.model_cfg)
    return text_pathway_forward(E_V, pen, state.prompt, tp, state.model_cfg)


def precompute(state: ModelState, images: np.ndarray, need_text: bool, batch: int = 128) -> dict[str, np.ndarray]:
    """Frozen-group features for every image, computed without recording a graph."""
    out: dict[str, list] = {"pen": [], "E_C": [], "E_L": []}
    with no_grad():
        for i in range(0, len(images), batch):
            x = Tensor(images[i:i + batch])
            f = detector_features(state, x)
            out["pen"].append(f.pen.data)
            out["E_C"].append(f.E_C.data)
            if need_text:
                E_L, _ = text_features(state, x, f.pen if state.model_cfg.detector_to_text else None)
                out["E_L"].append(E_L.data)
    return {k: np.concatenate(v) for k, v in out.items() if v}


@dataclass
class Prediction:
    detector_scores: np.ndarray
    scores: np.ndarray | None
    answer_ids: np.ndarray | None


def predict(state: ModelState, images: np.ndarray, batch: int = 128) -> Prediction:
    """Fakeness scores from the fusion head (when trained) and the detector head."""
    det, fused, ids = [], [], []
    full = state.has("text_pathway")
    with no_grad():
        for i in range(0, len(images), batch):
            x = Tensor(images[i:i + batch])
            f = detector_features(state, x)
            p = np.exp(f.det_logits.data - f.det_logits.data.max(axis=1, keepdims=True))
            det.append(p[:, 1] / p.sum(axis=1))
            if full:
                E_L, tok = text_features(state, x, f.pen if state.model_cfg.detector_to_text else None)
                out = vlfm_forward(f.E_C, E_L, state.params("vlfm"), state.vlfm_cfg)
                fused.append(out.score.data)
                ids.append(np.argmax(tok.data, axis=-1))
    return Prediction(np.concatenate(det), np.concatenate(fused) if fused else None,
                      np.concatenate(ids) if ids else None)


# -- stage runner ------------------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float
    lr: float


@dataclass
class StageResult:
    stage: int | str
    log: list[EpochLog] = field(default_factory=list)
    hashes_before: dict[str, str] = field(default_factory=dict)
    hashes_after: dict[str, str] = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.log[-1].loss


def check_prerequisites(stage, state: ModelState) -> None:
    for need in PREREQUISITES.get(stage, ()):
        if need not in state.completed:
            raise PipelineOrderError(f"stage {stage} needs a stage-{need} checkpoint first")


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-image random horizontal flip and RGB channel permutation."""
    out = np.empty_like(images)
    flips = rng.random(len(images)) < 0.5
    for i, img in enumerate(images):
        img = img[:, ::-1] if flips[i] else img
        out[i] = img[..., rng.permutation(3)]
    return out


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def run_stage(cfg: StageConfig, data: StageData, state: ModelState, seed: int) -> StageResult:
    """Train the groups ``cfg.trainable`` on ``data``; everything else stays bit-identical."""
    cfg.validate()
    check_prerequisites(cfg.stage, state)
    uses_ce = "CE" in cfg.loss
    uses_sft = "SFT" in cfg.loss
    if uses_sft and not data.has_text:
        raise DataError(f"stage {cfg.stage} needs answer targets for the SFT loss")
    if not state.has("text_pathway") and (uses_sft or cfg.stage == 3 or "text_pathway" in cfg.trainable):
        if data.vocab is None:
            raise DataError("the text pathway needs a vocabulary to be initialised")
        state.init_text_pathway(data.vocab)
    mcfg, vcfg = state.model_cfg, state.vlfm_cfg
    frozen = [g for g in state.groups if g not in cfg.trainable]
    result = StageResult(cfg.stage, hashes_before={g: group_hash(state.groups[g]) for g in frozen})

    state.set_trainable(cfg.trainable)
    train_detector = "detector" in cfg.trainable
    train_text = "text_pathway" in cfg.trainable
    cache = {} if train_detector else precompute(
        state, data.images, need_text=cfg.stage in (3, "joint") and not train_text)

    def forward(idx: np.ndarray):
        """(class logits or None, token logits or None) for one batch."""
        batch = data.images[idx]
        if train_detector and cfg.augment:
            batch = augment_batch(batch, aug_rng)
        x = Tensor(batch)
        if train_detector:
            f = detector_features(state, x)
            pen, E_C, det_logits = f.pen, f.E_C, f.det_logits
        else:
            pen, E_C, det_logits = Tensor(cache["pen"][idx]), Tensor(cache["E_C"][idx]), None
        if cfg.stage == 1:
            return det_logits, None
        if train_text or "E_L" not in cache:
            E_L, tok = text_features(state, x, pen if mcfg.detector_to_text else None)
        else:
            E_L, tok = Tensor(cache["E_L"][idx]), None
        if cfg.stage == 2:
            return None, tok
        return vlfm_forward(E_C, E_L, state.params("vlfm"), vcfg).logits, tok

    params = [t for g in cfg.trainable for t in state.params(g).values()]
    opt = AdamW(params, cfg.weight_decay)
    rng = np.random.default_rng([seed, 31, STAGE_IDS[cfg.stage]])
    aug_rng = np.random.default_rng([seed, 37, STAGE_IDS[cfg.stage]])
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(n)
        total, correct, steps = 0.0, 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            cls_logits, tok = forward(idx)
            terms = []
            if uses_ce and cls_logits is not None:
                terms.append(cross_entropy(cls_logits, data.labels[idx]))
                correct += _accuracy(cls_logits.data, data.labels[idx]) * len(idx)
            if uses_sft:
                mask = data.target_mask[idx]
                if mask.any():
                    terms.append(sft_loss(tok, data.targets[idx], mask))
                if cls_logits is None:
                    pred = np.argmax(tok.data, axis=-1)
                    correct += float(np.mean(pred[mask] == data.targets[idx][mask])) * len(idx)
            loss = terms[0] if len(terms) == 1 else terms[0] + terms[1]
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(epoch, value)
            backward(loss)
            if (b + 1) % cfg.grad_accum_steps == 0 or start + cfg.batch_size >= n:
                opt.step(lr, 1.0 / cfg.grad_accum_steps)
                opt.zero_grad()
            total += value * len(idx)
            steps += len(idx)
        entry = EpochLog(epoch, total / steps, correct / steps, lr)
        result.log.append(entry)
        log.info("stage %s epoch %d loss %.4f acc %.3f lr %.2e", cfg.stage, epoch, entry.loss, entry.accuracy, lr)

    state.set_trainable(())
    for g in state.groups:
        state.frozen[g] = g not in cfg.trainable
    result.hashes_after = {g: group_hash(state.groups[g]) for g in frozen}
    if result.hashes_after != result.hashes_before:
        raise ContractError(f"frozen groups changed during stage {cfg.stage}")
    if cfg.stage not in state.completed:
        state.completed.append(cfg.stage)
    return result
