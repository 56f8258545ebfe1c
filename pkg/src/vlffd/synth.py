"""Procedural toy corpus: one real video and four manipulated versions per identity.

Faces are layered ellipses over an identity-specific texture field, drifting a
pixel or two between frames. The four manipulations (M1..M4) stand in for the
roles of DF/F2F/FS/NT and only ever touch pixels inside a face-region box.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .imaging import Box, check_box, read_ppm, write_ppm

METHODS = ("M1", "M2", "M3", "M4")
REGIONS = ("left eye", "right eye", "nose", "mouth", "left cheek", "right cheek", "forehead")

_M1_REGIONS = ("left eye", "right eye", "mouth", "nose")
_M3_REGIONS = ("left cheek", "right cheek", "forehead", "nose")


@dataclass(frozen=True)
class FaceGeometry:
    cy: float
    cx: float
    ah: float
    aw: float
    eye_dx: float
    eye_y: float
    mouth_y: float
    mouth_w: float

    def box(self, size: int) -> Box:
        y0 = max(0, int(np.floor(self.cy - self.ah)))
        x0 = max(0, int(np.floor(self.cx - self.aw)))
        y1 = min(size, int(np.ceil(self.cy + self.ah)) + 1)
        x1 = min(size, int(np.ceil(self.cx + self.aw)) + 1)
        return (y0, x0, y1, x1)

    def region_box(self, region: str, size: int) -> Box:
        ah, aw = self.ah, self.aw
        ey = self.cy + self.eye_y * ah
        centres = {
            "left eye": (ey, self.cx - self.eye_dx * aw, 0.17 * ah, 0.26 * aw),
            "right eye": (ey, self.cx + self.eye_dx * aw, 0.17 * ah, 0.26 * aw),
            "nose": (self.cy + 0.1 * ah, self.cx, 0.2 * ah, 0.15 * aw),
            "mouth": (self.cy + self.mouth_y * ah, self.cx, 0.17 * ah, (self.mouth_w + 0.1) * aw),
            "left cheek": (self.cy + 0.2 * ah, self.cx - 0.55 * aw, 0.2 * ah, 0.22 * aw),
            "right cheek": (self.cy + 0.2 * ah, self.cx + 0.55 * aw, 0.2 * ah, 0.22 * aw),
            "forehead": (self.cy - 0.62 * ah, self.cx, 0.16 * ah, 0.42 * aw),
        }
        if region not in centres:
            raise ConfigError(f"unknown face region {region!r}")
        cy, cx, hy, hx = centres[region]
        fy0, fx0, fy1, fx1 = self.box(size)
        y0 = max(fy0, int(np.floor(cy - hy)))
        x0 = max(fx0, int(np.floor(cx - hx)))
        y1 = min(fy1, int(np.ceil(cy + hy)) + 1)
        x1 = min(fx1, int(np.ceil(cx + hx)) + 1)
        return (y0, x0, y1, x1)


@dataclass
class ToyVideo:
    video_id: str
    identity: int
    frames: list[np.ndarray]
    label: str
    method: str
    face_boxes: list[Box]
    seed: int
    source_id: str | None = None
    region: str | None = None
    artifact_boxes: list[Box] | None = None
    geometry: list[FaceGeometry] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if (self.label == "fake") != (self.method in METHODS):
            raise DataError(f"{self.video_id}: label {self.label!r} inconsistent with method {self.method!r}")
        if self.label == "fake" and self.source_id is None:
            raise DataError(f"{self.video_id}: fake videos must reference their source")

    def __len__(self) -> int:
        return len(self.frames)

    def index_record(self, path: str) -> dict:
        return {
            "id": self.video_id,
            "identity": self.identity,
            "label": self.label,
            "method": self.method,
            "path": path,
            "frame_count": len(self.frames),
            "face_box": [list(b) for b in self.face_boxes],
            "source": self.source_id,
            "region": self.region,
            "artifact_boxes": None if self.artifact_boxes is None else [list(b) for b in self.artifact_boxes],
            "seed": self.seed,
        }


def even_indices(T: int, k: int) -> list[int]:
    """``k`` evenly spaced indices into ``range(T)``: floor(i*(T-1)/(k-1)), or [0] when k == 1."""
    if T < 1 or k < 1:
        raise DataError(f"cannot sample {k} indices from {T} frames")
    k = min(k, T)
    if k == 1:
        return [0]
    return [(i * (T - 1)) // (k - 1) for i in range(k)]


# -- identities --------------------------------------------------------------------


# brown, dark brown, hazel, green, blue, grey
_IRIS = np.array([[90.0, 60.0, 35.0], [50.0, 32.0, 22.0], [110.0, 90.0, 50.0],
                  [70.0, 95.0, 60.0], [60.0, 90.0, 130.0], [95.0, 100.0, 105.0]])
_SKIN_DARK = np.array([120.0, 82.0, 60.0])
_SKIN_LIGHT = np.array([235.0, 196.0, 170.0])


def _identity_style(seed: int, identity: int, size: int) -> dict:
    rng = np.random.default_rng([seed, identity, 11])
    # skin tones lie along one dark-to-light axis, with a little per-channel jitter
    tone = rng.uniform(0.0, 1.0)
    skin = _SKIN_DARK + tone * (_SKIN_LIGHT - _SKIN_DARK) + rng.uniform(-8, 8, 3)
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size, 3)), (0.6, 0.6, 0)) * 8.0
    return {
        "skin": skin,
        "bg": rng.uniform(70, 150, 3),
        "bg_grad": rng.uniform(-15, 15, 3),
        "aw": rng.uniform(0.28, 0.30) * size,
        "ah": rng.uniform(0.34, 0.36) * size,
        "eye_dx": rng.uniform(0.36, 0.44),
        "eye_y": rng.uniform(-0.27, -0.23),
        "mouth_y": rng.uniform(0.42, 0.50),
        "mouth_w": rng.uniform(0.30, 0.40),
        "iris": _IRIS[int(rng.integers(len(_IRIS)))] + rng.uniform(-6, 6, 3),
        "lip": skin * rng.uniform([0.9, 0.5, 0.5], [1.05, 0.7, 0.7]),
        "texture": texture,
        "phase": rng.uniform(0, 2 * np.pi),
        "amp": rng.uniform(0.5, 1.5),
    }


def _ellipse(yy, xx, cy, cx, ay, ax):
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _render(style: dict, geo: FaceGeometry, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = style["bg"] + style["bg_grad"] * (yy / size - 0.5)[..., None]
    skin = style["skin"] * (1.0 - 0.15 * ((yy - geo.cy) / geo.ah))[..., None]
    shift = (int(round(geo.cy - size / 2)), int(round(geo.cx - size / 2)))
    skin = skin + np.roll(style["texture"], shift, axis=(0, 1))
    face = _ellipse(yy, xx, geo.cy, geo.cx, geo.ah, geo.aw)
    img[face] = skin[face]
    ah, aw = geo.ah, geo.aw
    ey = geo.cy + geo.eye_y * ah
    for side in (-1, 1):
        ex = geo.cx + side * geo.eye_dx * aw
        brow = (np.abs(yy - (ey - 0.2 * ah)) <= 0.04 * ah + 0.5) & (np.abs(xx - ex) <= 0.2 * aw)
        img[brow] = style["skin"] * 0.45
        img[_ellipse(yy, xx, ey, ex, 0.11 * ah, 0.19 * aw)] = 235.0
        img[_ellipse(yy, xx, ey, ex, 0.08 * ah, 0.08 * aw)] = style["iris"]
    img[_ellipse(yy, xx, geo.cy + 0.1 * ah, geo.cx, 0.14 * ah, 0.08 * aw)] *= 0.85
    my = geo.cy + geo.mouth_y * ah
    img[_ellipse(yy, xx, my, geo.cx, 0.08 * ah, geo.mouth_w * aw)] = style["lip"]
    img[(np.abs(yy - my) <= 0.5) & (np.abs(xx - geo.cx) <= geo.mouth_w * aw * 0.8)] = style["lip"] * 0.55
    img += rng.normal(0.0, 4.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def gen_identity(seed: int, identity: int, T: int, size: int = 40) -> ToyVideo:
    """Render the real video of one identity; deterministic in (seed, identity, T, size)."""
    if T < 1:
        raise DataError(f"frame count must be >= 1, got {T}")
    style = _identity_style(seed, identity, size)
    frames, boxes, geoms = [], [], []
    for t in range(T):
        rng = np.random.default_rng([seed, identity, 12, t])
        angle = 2 * np.pi * t / 16.0 + style["phase"]
        geo = FaceGeometry(
            cy=size / 2 + style["amp"] * np.sin(angle),
            cx=size / 2 + style["amp"] * np.cos(angle),
            ah=style["ah"], aw=style["aw"],
            eye_dx=style["eye_dx"], eye_y=style["eye_y"],
            mouth_y=style["mouth_y"], mouth_w=style["mouth_w"],
        )
        frames.append(_render(style, geo, size, rng))
        boxes.append(geo.box(size))
        geoms.append(geo)
    return ToyVideo(
        video_id=f"s{seed}_id{identity:04d}_real", identity=identity, frames=frames,
        label="real", method="none", face_boxes=boxes, seed=seed, geometry=geoms,
    )


# -- manipulations ----------------------------------------------------------------------


def _resample(patch: np.ndarray, h: int, w: int) -> np.ndarray:
    ph, pw = patch.shape[:2]
    ys = (np.arange(h) + 0.5) * ph / h - 0.5
    xs = (np.arange(w) + 0.5) * pw / w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([ndimage.map_coordinates(patch[..., c], [yy, xx], order=1, mode="nearest")
                     for c in range(patch.shape[2])], axis=-1)


def _donor_swap(real, rb, donor_frame, donor_box, tone):
    y0, x0, y1, x1 = rb
    dy0, dx0, dy1, dx1 = donor_box
    patch = donor_frame[dy0:dy1, dx0:dx1].astype(np.float64)
    out = real.copy()
    out[y0:y1, x0:x1] = _resample(patch, y1 - y0, x1 - x0) + tone
    return out


def _mouth_warp(real, rb, amp, freq):
    y0, x0, y1, x1 = rb
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    u = (xx - x0) / max(1, x1 - x0 - 1)
    v = (yy - y0) / max(1, y1 - y0 - 1)
    env = np.sin(np.pi * u) * np.sin(np.pi * v)
    sy = yy + amp * env * np.sin(2 * np.pi * freq * u)
    sx = xx + 0.6 * amp * env * np.cos(2 * np.pi * freq * v) + 0.5
    out = real.copy()
    for c in range(3):
        out[y0:y1, x0:x1, c] = ndimage.map_coordinates(real[..., c], [sy, sx], order=1, mode="nearest")
    return out


def _rect_replace(real, rb, offset):
    y0, x0, y1, x1 = rb
    out = real.copy()
    smooth = ndimage.gaussian_filter(real, (1.5, 1.5, 0))
    out[y0:y1, x0:x1] = smooth[y0:y1, x0:x1] + offset
    return out


def _blur_recolor(real, rb, sigma, tint):
    y0, x0, y1, x1 = rb
    out = real.copy()
    blurred = ndimage.gaussian_filter(real, (sigma, sigma, 0))
    out[y0:y1, x0:x1] = blurred[y0:y1, x0:x1] * tint
    return out


def _signed_uniform(rng, lo, hi, n):
    return rng.uniform(lo, hi, n) * rng.choice([-1.0, 1.0], n)


def plant_artifact(video: ToyVideo, method: str, seed: int, strength: float = 1.0,
                   max_truncation: int = 3) -> ToyVideo:
    """Manipulated counterpart of a real video.

    M1 pastes the same region from a donor identity, M2 warps the mouth, M3
    replaces a rectangle with a smoothed recoloured copy, M4 blurs and tints a
    region. ``strength`` scales the pixel change (1.0 = full artifact).
    """
    if method not in METHODS:
        raise ConfigError(f"unknown manipulation method {method!r}")
    if video.label != "real" or not video.geometry:
        raise DataError("artifacts are planted on freshly generated real videos")
    size = video.frames[0].shape[0]
    rng = np.random.default_rng([seed, video.identity, METHODS.index(method) + 1, 21])
    T = max(1, len(video) - int(rng.integers(0, max_truncation + 1)))

    if method == "M1":
        region = _M1_REGIONS[int(rng.integers(len(_M1_REGIONS)))]
        donor_id = 100_000 + video.identity * 31 + int(rng.integers(1, 1000))
        donor = gen_identity(seed, donor_id, T, size)
        # pasted without colour matching: keep a visible skin-tone mismatch
        tone = _signed_uniform(rng, 14, 28, 3)
    elif method == "M2":
        region = "mouth"
        amp, freq = rng.uniform(1.5, 2.5), rng.uniform(0.8, 1.4)
    elif method == "M3":
        region = _M3_REGIONS[int(rng.integers(len(_M3_REGIONS)))]
        offset = _signed_uniform(rng, 12, 30, 3)
    else:
        region = REGIONS[int(rng.integers(len(REGIONS)))]
        sigma = rng.uniform(1.0, 1.6)
        tint = 1.0 + _signed_uniform(rng, 0.08, 0.2, 3)

    frames, boxes = [], []
    for t in range(T):
        real = video.frames[t]
        rf = real.astype(np.float64)
        geo = video.geometry[t]
        rb = geo.region_box(region, size)
        if method == "M1":
            manip = _donor_swap(rf, rb, donor.frames[t], donor.geometry[t].region_box(region, size), tone)
        elif method == "M2":
            manip = _mouth_warp(rf, rb, amp, freq)
        elif method == "M3":
            manip = _rect_replace(rf, rb, offset)
        else:
            manip = _blur_recolor(rf, rb, sigma, tint)
        y0, x0, y1, x1 = rb
        out = rf.copy()
        out[y0:y1, x0:x1] = rf[y0:y1, x0:x1] + strength * (manip[y0:y1, x0:x1] - rf[y0:y1, x0:x1])
        fake = np.clip(np.rint(out), 0, 255).astype(np.uint8)
        if np.array_equal(fake[y0:y1, x0:x1], real[y0:y1, x0:x1]):
            # guarantee a visible change even for a vanishing strength
            cy, cx = (y0 + y1) // 2, (x0 + x1) // 2
            fake[cy, cx] = np.where(real[cy, cx] > 127, real[cy, cx] - 8, real[cy, cx] + 8)
        frames.append(fake)
        boxes.append(rb)

    return ToyVideo(
        video_id=f"s{video.seed}_id{video.identity:04d}_{method}", identity=video.identity,
        frames=frames, label="fake", method=method, face_boxes=list(video.face_boxes[:T]),
        seed=video.seed, source_id=video.video_id, region=region, artifact_boxes=boxes,
        geometry=list(video.geometry[:T]),
    )


# -- self-blended pseudo fakes ------------------------------------------------------------


@dataclass(frozen=True)
class BlendRecipe:
    brightness: float
    contrast: float
    channel_shift: tuple[float, float, float]
    blur_sigma: float
    center: tuple[float, float]
    axes: tuple[float, float]
    smooth_sigma: float
    box: Box
    shape: str = "ellipse"
    offset: tuple[float, float] = (0.0, 0.0)


def sample_blend_recipe(rng: np.random.Generator, box: Box) -> BlendRecipe:
    y0, x0, y1, x1 = box
    h, w = y1 - y0, x1 - x0
    return BlendRecipe(
        brightness=float(_signed_uniform(rng, 6, 20, 1)[0]),
        contrast=float(rng.uniform(0.85, 1.15)),
        channel_shift=tuple(float(v) for v in _signed_uniform(rng, 6, 18, 3)),
        blur_sigma=float(rng.uniform(0.6, 1.4)) if rng.random() < 0.6 else 0.0,
        center=(float(rng.uniform(y0 + 0.25 * h, y1 - 0.25 * h)), float(rng.uniform(x0 + 0.25 * w, x1 - 0.25 * w))),
        axes=(float(rng.uniform(0.15, 0.35) * h), float(rng.uniform(0.15, 0.35) * w)),
        smooth_sigma=float(rng.uniform(0.0, 1.2)),
        box=box,
        shape="rect" if rng.random() < 0.5 else "ellipse",
        offset=tuple(float(v) for v in rng.uniform(-1.2, 1.2, 2)),
    )


def pseudo_source(image: np.ndarray, recipe: BlendRecipe) -> np.ndarray:
    """Photometrically altered copy of the frame (uint8)."""
    img = np.asarray(image, dtype=np.float64)
    if any(recipe.offset):
        # slight misalignment between the altered copy and the target frame
        img = ndimage.shift(img, (*recipe.offset, 0), order=1, mode="nearest")
    if recipe.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, (recipe.blur_sigma, recipe.blur_sigma, 0))
    m = img.mean(axis=(0, 1), keepdims=True)
    img = (img - m) * recipe.contrast + m + recipe.brightness + np.asarray(recipe.channel_shift)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def blend_mask(shape: tuple[int, ...], recipe: BlendRecipe) -> np.ndarray:
    """Smoothed ellipse or rectangle, zeroed off the face, values in [0, 1]."""
    h, w = shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    (cy, cx), (ay, ax) = recipe.center, recipe.axes
    if recipe.shape == "rect":
        mask = ((np.abs(yy - cy) <= ay) & (np.abs(xx - cx) <= ax)).astype(np.float64)
    else:
        mask = _ellipse(yy, xx, cy, cx, ay, ax).astype(np.float64)
    if recipe.smooth_sigma > 0:
        mask = ndimage.gaussian_filter(mask, recipe.smooth_sigma)
    # keep the blend on the face itself: the ellipse inscribed in the face box
    y0, x0, y1, x1 = recipe.box
    inside = _ellipse(yy, xx, (y0 + y1 - 1) / 2, (x0 + x1 - 1) / 2, (y1 - y0) / 2 - 1, (x1 - x0) / 2 - 1)
    return np.clip(mask * inside, 0.0, 1.0)


def blend(source: np.ndarray, target: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel convex combination ``mask * source + (1 - mask) * target``."""
    m = np.asarray(mask, dtype=np.float64)[..., None]
    out = m * source.astype(np.float64) + (1.0 - m) * target.astype(np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def self_blend(image: np.ndarray, box: Box, seed, mask: np.ndarray | None = None,
               min_change: float = 8.0, attempts: int = 8) -> np.ndarray:
    """Pseudo-fake made by blending an altered copy of ``image`` back onto itself.

    Recipes whose blend barely changes the face (mean absolute change under
    ``min_change`` grey levels where the mask exceeds 0.5) are redrawn, since an
    invisible pseudo-fake is just a mislabelled real frame.
    """
    check_box(box, image.shape)
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        recipe = sample_blend_recipe(rng, box)
        source = pseudo_source(image, recipe)
        m = blend_mask(image.shape, recipe) if mask is None else np.asarray(mask, dtype=np.float64)
        out = blend(source, image, m)
        core = m > 0.5
        if core.any() and np.abs(out[core].astype(np.float64) - image[core]).mean() >= min_change:
            break
    return out


# -- corpus ---------------------------------------------------------------------------------


@dataclass
class IdentityGroup:
    identity: int
    real: ToyVideo
    fakes: dict[str, ToyVideo]

    def videos(self) -> list[ToyVideo]:
        return [self.real] + [self.fakes[m] for m in METHODS]


@dataclass
class Corpus:
    seed: int
    strength: float
    groups: list[IdentityGroup]

    def videos(self) -> list[ToyVideo]:
        return [v for g in self.groups for v in g.videos()]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for v in self.videos():
            h.update(json.dumps(v.index_record(""), sort_keys=True).encode())
            for f in v.frames:
                h.update(f.tobytes())
        return h.hexdigest()

    def video(self, video_id: str) -> ToyVideo:
        for v in self.videos():
            if v.video_id == video_id:
                return v
        raise DataError(f"unknown video {video_id!r}")


def generate_corpus(seed: int, identities: int, frames: int = 32, size: int = 40,
                    strength: float = 1.0, max_truncation: int = 3) -> Corpus:
    groups = []
    for i in range(identities):
        real = gen_identity(seed, i, frames, size)
        fakes = {m: plant_artifact(real, m, seed, strength, max_truncation) for m in METHODS}
        groups.append(IdentityGroup(i, real, fakes))
    return Corpus(seed=seed, strength=strength, groups=groups)


def save_corpus(corpus: Corpus, root: str | Path) -> Path:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    lines = []
    for v in corpus.videos():
        rel = f"frames/{v.video_id}"
        (root / rel).mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(v.frames):
            write_ppm(root / rel / f"{t:04d}.ppm", frame)
        lines.append(json.dumps(v.index_record(rel), sort_keys=True))
    index = root / "index.jsonl"
    index.write_text("\n".join(lines) + "\n")
    (root / "corpus.json").write_text(json.dumps(
        {"seed": corpus.seed, "strength": corpus.strength, "content_hash": corpus.content_hash()},
        indent=2, sort_keys=True))
    return index


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    index = root / "index.jsonl"
    if not index.exists():
        raise DataError(f"no corpus index at {index}")
    meta = json.loads((root / "corpus.json").read_text())
    by_identity: dict[int, dict] = {}
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        frames = [read_ppm(root / rec["path"] / f"{t:04d}.ppm") for t in range(rec["frame_count"])]
        video = ToyVideo(
            video_id=rec["id"], identity=rec["identity"], frames=frames, label=rec["label"],
            method=rec["method"], face_boxes=[tuple(b) for b in rec["face_box"]], seed=rec["seed"],
            source_id=rec["source"], region=rec["region"],
            artifact_boxes=None if rec["artifact_boxes"] is None else [tuple(b) for b in rec["artifact_boxes"]],
        )
        slot = by_identity.setdefault(video.identity, {"real": None, "fakes": {}})
        if video.label == "real":
            slot["real"] = video
        else:
            slot["fakes"][video.method] = video
    groups = []
    for ident in sorted(by_identity):
        slot = by_identity[ident]
        if slot["real"] is None or set(slot["fakes"]) != set(METHODS):
            raise DataError(f"identity {ident} lacks its real video or one of {METHODS}")
        groups.append(IdentityGroup(ident, slot["real"], slot["fakes"]))
    return Corpus(seed=meta["seed"], strength=meta["strength"], groups=groups)
