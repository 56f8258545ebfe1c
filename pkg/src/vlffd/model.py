"""All learnable parameters, partitioned into detector / text-pathway / VLFM groups.

A checkpoint directory holds one VLFT file per initialised group, the fixed
prompt embeddings, the vocabulary and a ``manifest.json`` with per-group
tensor names, shapes, freeze flags and content hashes.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import GROUPS, ModelConfig, VlfmConfig
from .encoders import Vocabulary, init_detector, init_text_pathway, make_prompt_embeddings
from .errors import DataError, PipelineOrderError
from .tensor import Tensor
from .tensor_io import read_tensor, write_tensor
from .vlfm import init_vlfm

Params = dict[str, Tensor]


def group_bytes(params: Params) -> bytes:
    """Tensors in sorted-name order, each VLFT-encoded; names live in the manifest."""
    buf = io.BytesIO()
    for name in sorted(params):
        write_tensor(buf, params[name])
    return buf.getvalue()


def group_hash(params: Params) -> str:
    return hashlib.sha256(group_bytes(params)).hexdigest()


def group_rng(seed: int, group: str) -> np.random.Generator:
    return np.random.default_rng([seed, GROUPS.index(group) + 1, 77])


@dataclass
class ModelState:
    model_cfg: ModelConfig
    vlfm_cfg: VlfmConfig
    seed: int
    groups: dict[str, Params] = field(default_factory=dict)
    frozen: dict[str, bool] = field(default_factory=lambda: {g: False for g in GROUPS})
    completed: list = field(default_factory=list)
    vocab: Vocabulary | None = None
    prompt: np.ndarray | None = None

    @classmethod
    def create(cls, model_cfg: ModelConfig, vlfm_cfg: VlfmConfig, seed: int) -> "ModelState":
        model_cfg.validate()
        vlfm_cfg.validate(model_cfg.d)
        state = cls(model_cfg, vlfm_cfg, seed)
        state.groups["detector"] = init_detector(model_cfg, group_rng(seed, "detector"))
        state.groups["vlfm"] = init_vlfm(model_cfg.d, vlfm_cfg, group_rng(seed, "vlfm"))
        state.prompt = make_prompt_embeddings(model_cfg, seed)
        return state

    def init_text_pathway(self, vocab: Vocabulary) -> None:
        """The text pathway is sized by the vocabulary, so it is built once that is known."""
        self.vocab = vocab
        self.groups["text_pathway"] = init_text_pathway(self.model_cfg, len(vocab), group_rng(self.seed, "text_pathway"))

    def has(self, group: str) -> bool:
        return group in self.groups

    def require(self, *groups: str) -> None:
        missing = [g for g in groups if g not in self.groups]
        if missing:
            raise PipelineOrderError(f"parameter groups {missing} are not initialised")

    def params(self, group: str) -> Params:
        self.require(group)
        return self.groups[group]

    def hashes(self) -> dict[str, str]:
        return {g: group_hash(p) for g, p in self.groups.items()}

    def set_trainable(self, trainable) -> None:
        for g in GROUPS:
            self.frozen[g] = g not in trainable
            for t in self.groups.get(g, {}).values():
                t.requires_grad = g in trainable
                t.grad = None

    def clone(self) -> "ModelState":
        groups = {g: {k: Tensor(t.data.copy(), name=t.name) for k, t in p.items()} for g, p in self.groups.items()}
        return ModelState(self.model_cfg, self.vlfm_cfg, self.seed, groups, dict(self.frozen),
                          list(self.completed), self.vocab,
                          None if self.prompt is None else self.prompt.copy())

    # -- persistence -------------------------------------------------------------------

    def save(self, root: str | Path) -> dict:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        manifest = {"seed": self.seed, "completed": [str(s) for s in self.completed], "groups": {}}
        for g, p in self.groups.items():
            blob = group_bytes(p)
            (root / f"{g}.vlft").write_bytes(blob)
            manifest["groups"][g] = {
                "tensors": [{"name": n, "shape": list(p[n].shape)} for n in sorted(p)],
                "frozen": self.frozen[g],
                "sha256": hashlib.sha256(blob).hexdigest(),
            }
        with (root / "prompt.vlft").open("wb") as fh:
            write_tensor(fh, Tensor(self.prompt))
        if self.vocab is not None:
            (root / "vocab.json").write_text(json.dumps(self.vocab.tokens))
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return manifest

    @classmethod
    def load(cls, root: str | Path, model_cfg: ModelConfig, vlfm_cfg: VlfmConfig) -> "ModelState":
        root = Path(root)
        mpath = root / "manifest.json"
        if not mpath.exists():
            raise PipelineOrderError(f"no checkpoint at {root}")
        manifest = json.loads(mpath.read_text())
        state = cls(model_cfg, vlfm_cfg, manifest["seed"])
        state.completed = [int(s) if s.isdigit() else s for s in manifest["completed"]]
        for g, meta in manifest["groups"].items():
            blob = (root / f"{g}.vlft").read_bytes()
            if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
                raise DataError(f"checkpoint group {g} does not match its manifest hash")
            fh = io.BytesIO(blob)
            params = {}
            for entry in meta["tensors"]:
                t = read_tensor(fh)
                if list(t.shape) != entry["shape"]:
                    raise DataError(f"{g}/{entry['name']}: shape {t.shape} != manifest {entry['shape']}")
                t.name = entry["name"]
                params[entry["name"]] = t
            state.groups[g] = params
            state.frozen[g] = meta["frozen"]
        with (root / "prompt.vlft").open("rb") as fh:
            state.prompt = read_tensor(fh).data
        if (root / "vocab.json").exists():
            state.vocab = Vocabulary(json.loads((root / "vocab.json").read_text()))
        return state
