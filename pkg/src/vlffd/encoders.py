"""Small trainable stand-ins for the detector, the image encoder and the text pathway.

Dataflow per image:

* detector: three stride-2 filter stages; the stage-2 (penultimate) map feeds
  the text pathway, the stage-3 (final) map becomes the fusion tokens ``E_C``;
* image encoder: non-overlapping patch embedding giving ``E_V``;
* text pathway: ``[proj_V(E_V); proj_C(E_C_pen); fixed prompt]`` passed through
  a token mixer; the last ``n_l`` hidden states are ``E_L`` and the answer
  positions are decoded into an explanation.

All forwards accept a leading batch axis.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, ShapeError
from .tensor import Tensor, amax, concat, expand, gelu, pad_hw, patches

Params = dict[str, Tensor]

KERNEL = 4


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)), name=name)


def _zeros(n: int, name: str) -> Tensor:
    return Tensor(np.zeros(n), name=name)


# -- detector --------------------------------------------------------------------------


def init_detector(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    c1, c2 = cfg.stage_channels
    chans = [3, c1, c2, cfg.d]
    p: Params = {}
    for s in range(3):
        fan_in = KERNEL * KERNEL * chans[s]
        p[f"stage{s + 1}.w"] = _dense(rng, fan_in, chans[s + 1], f"stage{s + 1}.w")
        p[f"stage{s + 1}.b"] = _zeros(chans[s + 1], f"stage{s + 1}.b")
    width = 2 * cfg.d if cfg.detector_pool == "mean_max" else cfg.d
    p["head.w"] = _dense(rng, width, 2, "head.w")
    p["head.b"] = _zeros(2, "head.b")
    return p


def _stage(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    cols = patches(pad_hw(x, 1), KERNEL, 2)
    return gelu(cols @ w + b)


def pool_map(fmap: Tensor, mode: str) -> Tensor:
    """(B, h, w, c) -> (B, c) or (B, 2c); max pooling keeps small local artifacts from washing out."""
    if mode == "mean":
        return fmap.mean(axis=(1, 2))
    if mode == "max":
        return amax(fmap, (1, 2))
    return concat([fmap.mean(axis=(1, 2)), amax(fmap, (1, 2))], axis=1)


def detect_features(images, params: Params, cfg: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """(penultimate map, final map, 2-class logits) for a batch (B, S, S, 3) or one image."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != (cfg.input_size, cfg.input_size, 3):
        raise ShapeError(f"detector expects {cfg.input_size}x{cfg.input_size}x3 images, got {x.shape}")
    h1 = _stage(x, params["stage1.w"], params["stage1.b"])
    pen = _stage(h1, params["stage2.w"], params["stage2.b"])
    final = _stage(pen, params["stage3.w"], params["stage3.b"])
    logits = pool_map(final, cfg.detector_pool) @ params["head.w"] + params["head.b"]
    if single:
        return pen[0], final[0], logits[0]
    return pen, final, logits


def flatten_spatial(fmap: Tensor) -> Tensor:
    """(h, w, c) -> (h*w, c) in row-major token order; (B, h, w, c) -> (B, h*w, c)."""
    if fmap.ndim == 3:
        h, w, c = fmap.shape
        return fmap.reshape(h * w, c)
    if fmap.ndim == 4:
        B, h, w, c = fmap.shape
        return fmap.reshape(B, h * w, c)
    raise ShapeError(f"flatten_spatial expects a rank-3 map, got {fmap.shape}")


def unflatten_spatial(tokens: Tensor, h: int, w: int) -> Tensor:
    if tokens.shape[-2] != h * w:
        raise ShapeError(f"{tokens.shape[-2]} tokens cannot form a {h}x{w} grid")
    return tokens.reshape(tokens.shape[:-2] + (h, w, tokens.shape[-1]))


# -- image encoder + text pathway --------------------------------------------------------


PAD, UNK = "<pad>", "<unk>"
_TOKEN_RE = re.compile(r"[A-Za-z0-9']+|[^\sA-Za-z0-9']")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def detokenize(tokens: Iterable[str]) -> str:
    out = ""
    for tok in tokens:
        if tok in (PAD,):
            continue
        if out and not re.fullmatch(r"[,.;:!?)]", tok):
            out += " "
        out += tok
    return out


@dataclass
class Vocabulary:
    tokens: list[str]

    def __post_init__(self):
        if self.tokens[:2] != [PAD, UNK]:
            raise ConfigError("vocabulary must start with <pad>, <unk>")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        words = sorted({tok for text in texts for tok in tokenize(text)} - {PAD, UNK})
        return cls([PAD, UNK] + words)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str, length: int | None = None) -> list[int]:
        ids = [self.index.get(t, 1) for t in tokenize(text)]
        if length is not None:
            ids = (ids + [0] * length)[:length]
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return detokenize(self.tokens[i] for i in ids)


def init_text_pathway(cfg: ModelConfig, vocab_size: int, rng: np.random.Generator) -> Params:
    pp = cfg.patch * cfg.patch * 3
    c2 = cfg.stage_channels[1]
    p: Params = {
        "image_encoder.w": _dense(rng, pp, cfg.d_v, "image_encoder.w"),
        "image_encoder.b": _zeros(cfg.d_v, "image_encoder.b"),
        "proj_v.w": _dense(rng, cfg.d_v, cfg.d_t, "proj_v.w"),
        "proj_v.b": _zeros(cfg.d_t, "proj_v.b"),
        "proj_c.w": _dense(rng, c2, cfg.d_t, "proj_c.w"),
        "proj_c.b": _zeros(cfg.d_t, "proj_c.b"),
    }
    for i in range(cfg.mixer_layers):
        p[f"mixer{i}.w_in"] = _dense(rng, cfg.d_t, cfg.mixer_hidden, f"mixer{i}.w_in")
        p[f"mixer{i}.w_ctx"] = _dense(rng, cfg.d_t, cfg.mixer_hidden, f"mixer{i}.w_ctx")
        p[f"mixer{i}.b_in"] = _zeros(cfg.mixer_hidden, f"mixer{i}.b_in")
        p[f"mixer{i}.w_out"] = Tensor(
            rng.normal(0.0, 0.5 / np.sqrt(cfg.mixer_hidden), (cfg.mixer_hidden, cfg.d_t)), name=f"mixer{i}.w_out")
        p[f"mixer{i}.b_out"] = _zeros(cfg.d_t, f"mixer{i}.b_out")
    # token embedding table, tied as the output head
    p["token_embedding"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(cfg.d_t), (vocab_size, cfg.d_t)),
                                  name="token_embedding")
    p["head.b"] = _zeros(vocab_size, "head.b")
    return p


def make_prompt_embeddings(cfg: ModelConfig, seed: int) -> np.ndarray:
    """Fixed prompt constants: question positions followed by answer slots."""
    rng = np.random.default_rng([seed, 404])
    return rng.normal(0.0, 1.0, (cfg.question_len + cfg.answer_len, cfg.d_t))


def encode_image_tokens(images, params: Params, cfg: ModelConfig) -> Tensor:
    """Non-overlapping patch embedding: token k is the affine image of patch k."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    B, H, W, _ = x.shape
    p = cfg.patch
    if H % p or W % p:
        raise ShapeError(f"image {H}x{W} is not divisible into {p}x{p} patches")
    if (H, W) != (cfg.input_size, cfg.input_size):
        raise ShapeError(f"image encoder expects {cfg.input_size}x{cfg.input_size}, got {H}x{W}")
    cols = patches(x, p, p).reshape(B, (H // p) * (W // p), p * p * 3)
    tokens = cols @ params["image_encoder.w"] + params["image_encoder.b"]
    return tokens[0] if single else tokens


def text_pathway_forward(E_V: Tensor, E_C_pen: Tensor | None, prompt, params: Params,
                         cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Run the text pathway on a batch.

    ``E_V`` is (B, n_v, d_v); ``E_C_pen`` is (B, n_pen, c_pen) flattened
    penultimate tokens, or None when the detector-to-text link is ablated.
    Returns ``E_L`` (B, n_l, d_t) and answer-slot logits (B, answer_len, vocab).
    """
    prompt = np.asarray(prompt.data if isinstance(prompt, Tensor) else prompt, dtype=np.float64)
    if prompt.ndim != 2 or prompt.shape[0] == 0:
        raise ConfigError("prompt embeddings must be a non-empty (P, d_t) matrix")
    if E_V.shape[-1] != params["proj_v.w"].shape[0]:
        raise ShapeError(f"E_V width {E_V.shape[-1]} does not match projector input {params['proj_v.w'].shape[0]}")
    B = E_V.shape[0]
    parts = [E_V @ params["proj_v.w"] + params["proj_v.b"]]
    if cfg.detector_to_text:
        if E_C_pen is None:
            raise ShapeError("detector tokens are required unless detector_to_text is disabled")
        if E_C_pen.shape[-1] != params["proj_c.w"].shape[0]:
            raise ShapeError(f"E_C width {E_C_pen.shape[-1]} does not match projector input {params['proj_c.w'].shape[0]}")
        parts.append(E_C_pen @ params["proj_c.w"] + params["proj_c.b"])
    parts.append(expand(Tensor(prompt), 0, B))
    h = concat(parts, axis=1)
    n = h.shape[1]
    for i in range(cfg.mixer_layers):
        ctx = h.mean(axis=1) @ params[f"mixer{i}.w_ctx"]
        u = h @ params[f"mixer{i}.w_in"] + expand(ctx, 1, n) + params[f"mixer{i}.b_in"]
        h = h + gelu(u) @ params[f"mixer{i}.w_out"] + params[f"mixer{i}.b_out"]
    E_L = h[:, n - cfg.n_l:, :]
    answer = h[:, n - cfg.answer_len:, :]
    logits = answer @ params["token_embedding"].T + params["head.b"]
    return E_L, logits


def sequence_length(cfg: ModelConfig) -> int:
    n_v = (cfg.input_size // cfg.patch) ** 2
    n_pen = (cfg.input_size // 4) ** 2 if cfg.detector_to_text else 0
    return n_v + n_pen + cfg.question_len + cfg.answer_len


def greedy_tokens(token_logits) -> np.ndarray:
    """Argmax per position; ``np.argmax`` already resolves ties to the lowest id."""
    logits = token_logits.data if isinstance(token_logits, Tensor) else np.asarray(token_logits)
    return np.argmax(logits, axis=-1)


def decode_explanation(token_logits, vocab: Vocabulary) -> str:
    ids = greedy_tokens(token_logits)
    if ids.ndim != 1:
        raise ShapeError(f"decode_explanation expects (positions, vocab) logits, got {np.shape(token_logits)}")
    return vocab.decode([int(i) for i in ids])
