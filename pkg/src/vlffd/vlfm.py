"""Vision-language fusion: stacked bidirectional cross-attention layers.

Each layer runs image->text attention (image tokens query the text tokens)
and text->image attention in parallel on the layer inputs, then refines
each branch with its own MLP. After the last layer both token sets are mean
pooled, combined into a joint vector and classified.

Attention logits are scaled by the per-head width ``sqrt(d / n_heads)``.
There are no residual connections, normalisation layers or positional
encodings inside the module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import FUSION_MODES, VlfmConfig
from .errors import ConfigError, ShapeError
from .tensor import Tensor, concat, gelu, mul, softmax

Params = dict[str, Tensor]


def init_vlfm(d: int, cfg: VlfmConfig, rng: np.random.Generator) -> Params:
    cfg.validate(d)
    p: Params = {}

    def dense(name, fan_in, fan_out):
        p[name] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)), name=name)

    hidden = cfg.mlp_ratio * d
    for layer in range(cfg.layers):
        for direction in ("i2t", "t2i"):
            for w in ("wq", "wk", "wv"):
                dense(f"layer{layer}.{direction}.{w}", d, d)
        for branch in ("mlp_img", "mlp_text"):
            dense(f"layer{layer}.{branch}.w1", d, hidden)
            p[f"layer{layer}.{branch}.b1"] = Tensor(np.zeros(hidden))
            dense(f"layer{layer}.{branch}.w2", hidden, d)
            p[f"layer{layer}.{branch}.b2"] = Tensor(np.zeros(d))
    dz = 2 * d if cfg.fusion_mode == "concatenation" else d
    dense("cls.w", dz, 2)
    p["cls.b"] = Tensor(np.zeros(2))
    return p


def cross_attention(Q_src: Tensor, KV_src: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                    n_heads: int, return_weights: bool = False):
    """Multi-head cross-attention of ``Q_src`` (m x d) over ``KV_src`` (n x d).

    Batched inputs (B, m, d) / (B, n, d) are accepted too. With
    ``return_weights`` the attention probabilities (B, heads, m, n) come back
    as a second value.
    """
    single = Q_src.ndim == 2
    if single:
        Q_src = Q_src.reshape((1,) + Q_src.shape)
        KV_src = KV_src.reshape((1,) + KV_src.shape)
    B, m, d = Q_src.shape
    if KV_src.ndim != 3 or KV_src.shape[0] != B or KV_src.shape[2] != d:
        raise ShapeError(f"query tokens {Q_src.shape} and key/value tokens {KV_src.shape} disagree")
    if d % n_heads:
        raise ConfigError(f"d={d} is not divisible by n_heads={n_heads}")
    n = KV_src.shape[1]
    dh = d // n_heads

    def heads(x: Tensor, length: int) -> Tensor:
        return x.reshape(B, length, n_heads, dh).permute(0, 2, 1, 3)

    q = heads(Q_src @ wq, m)
    k = heads(KV_src @ wk, n)
    v = heads(KV_src @ wv, n)
    weights = softmax((q @ k.T) * (1.0 / np.sqrt(dh)), axis=-1)
    out = (weights @ v).permute(0, 2, 1, 3).reshape(B, m, d)
    if single:
        out = out[0]
    return (out, weights) if return_weights else out


def _mlp(x: Tensor, p: Params, prefix: str) -> Tensor:
    return gelu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]) @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


@dataclass
class LayerTrace:
    img_to_text: Tensor | None
    text_to_img: Tensor | None


def fusion_layer(E_C: Tensor, E_L: Tensor, params: Params, layer: int,
                 cfg: VlfmConfig) -> tuple[Tensor, Tensor, LayerTrace]:
    """One fusion layer; both attentions read the layer inputs.

    A disabled direction sends its branch's own input straight through the
    branch MLP.
    """
    if E_C.shape[-1] != E_L.shape[-1]:
        raise ShapeError(f"image width {E_C.shape[-1]} differs from text width {E_L.shape[-1]}")
    pre = f"layer{layer}"
    trace = LayerTrace(None, None)
    if cfg.img_to_text:
        att_c, trace.img_to_text = cross_attention(
            E_C, E_L, params[f"{pre}.i2t.wq"], params[f"{pre}.i2t.wk"], params[f"{pre}.i2t.wv"],
            cfg.n_heads, return_weights=True)
    else:
        att_c = E_C
    if cfg.text_to_img:
        att_l, trace.text_to_img = cross_attention(
            E_L, E_C, params[f"{pre}.t2i.wq"], params[f"{pre}.t2i.wk"], params[f"{pre}.t2i.wv"],
            cfg.n_heads, return_weights=True)
    else:
        att_l = E_L
    return _mlp(att_c, params, f"{pre}.mlp_img"), _mlp(att_l, params, f"{pre}.mlp_text"), trace


def gap1d(E: Tensor) -> Tensor:
    """Mean over the token axis: (n, d) -> (d,), (B, n, d) -> (B, d)."""
    return E.mean(axis=-2)


def joint_representation(g_C: Tensor, g_L: Tensor, mode: str) -> Tensor:
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    if mode == "concatenation":
        if g_C.shape[:-1] != g_L.shape[:-1]:
            raise ShapeError(f"cannot concatenate {g_C.shape} and {g_L.shape}")
        return concat([g_C, g_L], axis=-1)
    if g_C.shape != g_L.shape:
        raise ShapeError(f"{mode} needs equal shapes, got {g_C.shape} and {g_L.shape}")
    return mul(g_C, g_L) if mode == "elementwise_product" else g_C + g_L


def classify_logits(Z: Tensor, params: Params) -> Tensor:
    if Z.ndim == 1:
        return (Z.reshape(1, -1) @ params["cls.w"] + params["cls.b"])[0]
    return Z @ params["cls.w"] + params["cls.b"]


def classify(Z: Tensor, params: Params) -> Tensor:
    """Fakeness score: softmax probability of the "fake" class (index 1)."""
    probs = softmax(classify_logits(Z, params), axis=-1)
    return probs[..., 1]


@dataclass
class VlfmOutput:
    logits: Tensor
    score: Tensor
    E_C: Tensor
    E_L: Tensor
    traces: list[LayerTrace]


def vlfm_forward(E_C: Tensor, E_L: Tensor, params: Params, cfg: VlfmConfig) -> VlfmOutput:
    traces = []
    for layer in range(cfg.layers):
        E_C, E_L, trace = fusion_layer(E_C, E_L, params, layer, cfg)
        traces.append(trace)
    Z = joint_representation(gap1d(E_C), gap1d(E_L), cfg.fusion_mode)
    logits = classify_logits(Z, params)
    score = softmax(logits, axis=-1)[..., 1]
    return VlfmOutput(logits=logits, score=score, E_C=E_C, E_L=E_L, traces=traces)


def attention_mass(E_C: Tensor, E_L: Tensor, params: Params, cfg: VlfmConfig) -> np.ndarray:
    """Final-layer text->image weights averaged over heads and text tokens, (.., n_c)."""
    if not cfg.text_to_img:
        raise ConfigError("attention maps need the text->image direction enabled")
    out = vlfm_forward(E_C, E_L, params, cfg)
    w = out.traces[-1].text_to_img.data  # (B, heads, n_l, n_c)
    mass = w.mean(axis=(1, 2))
    return mass[0] if E_C.ndim == 2 else mass


def normalize_map(raw: np.ndarray) -> np.ndarray:
    lo = raw.min(axis=(-2, -1), keepdims=True)
    hi = raw.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    return np.where(span > 0, (raw - lo) / np.where(span > 0, span, 1.0), 0.0)


def attention_map(E_C: Tensor, E_L: Tensor, params: Params, cfg: VlfmConfig,
                  grid: tuple[int, int], normalize: bool = True) -> np.ndarray:
    """Heat grid over the detector tokens, min-max normalised to [0, 1].

    A constant map normalises to all zeros.
    """
    h, w = grid
    n_c = E_C.shape[-2]
    if h * w != n_c:
        raise ShapeError(f"{n_c} image tokens do not form a {h}x{w} grid")
    raw = attention_mass(E_C, E_L, params, cfg)
    raw = raw.reshape(raw.shape[:-1] + (h, w))
    return normalize_map(raw) if normalize else raw


def argmax_cell(heat: np.ndarray) -> tuple[int, int]:
    """Grid cell of the maximum; ties go to the lowest flat index."""
    flat = int(np.argmax(heat.reshape(-1)))
    return divmod(flat, heat.shape[-1])
