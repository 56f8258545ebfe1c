import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlffd.errors import ConfigError, DataError
from vlffd.imaging import image_hash
from vlffd.synth import (
    METHODS, blend, blend_mask, even_indices, gen_identity, generate_corpus, load_corpus, plant_artifact,
    pseudo_source, sample_blend_recipe, save_corpus, self_blend,
)


@pytest.fixture(scope="module")
def real():
    return gen_identity(3, 5, 6)


# -- identities ----------------------------------------------------------------------------


def test_identity_deterministic(real):
    again = gen_identity(3, 5, 6)
    assert [image_hash(f) for f in real.frames] == [image_hash(f) for f in again.frames]


def test_identities_differ(real):
    other = gen_identity(3, 6, 6)
    assert np.count_nonzero(real.frames[0] != other.frames[0]) > 0


def test_single_frame_video():
    v = gen_identity(0, 0, 1)
    assert len(v) == 1 and v.frames[0].dtype == np.uint8


def test_frames_drift_but_stay_close(real):
    a, b = real.frames[0].astype(float), real.frames[1].astype(float)
    assert 0 < np.abs(a - b).mean() < 20


# -- artifacts --------------------------------------------------------------------------------


@pytest.mark.parametrize("method", METHODS)
def test_artifact_is_local_and_visible(real, method):
    fake = plant_artifact(real, method, 3)
    assert fake.method == method and fake.label == "fake" and fake.source_id == real.video_id
    assert len(real) - 3 <= len(fake) <= len(real)
    for t, frame in enumerate(fake.frames):
        y0, x0, y1, x1 = fake.face_boxes[t]
        inside = np.zeros(frame.shape[:2], bool)
        inside[y0:y1, x0:x1] = True
        diff = np.any(frame != real.frames[t], axis=-1)
        assert diff[inside].any()
        assert not diff[~inside].any()


def test_unknown_method(real):
    with pytest.raises(ConfigError):
        plant_artifact(real, "M9", 0)


def test_artifact_needs_real_source(real):
    with pytest.raises(DataError):
        plant_artifact(plant_artifact(real, "M1", 0), "M2", 0)


def test_strength_scales_change(real):
    full = plant_artifact(real, "M3", 1, strength=1.0)
    weak = plant_artifact(real, "M3", 1, strength=0.3)
    d_full = np.abs(full.frames[0].astype(float) - real.frames[0]).sum()
    d_weak = np.abs(weak.frames[0].astype(float) - real.frames[0]).sum()
    assert 0 < d_weak < d_full


# -- self blending -------------------------------------------------------------------------------


def test_zero_mask_is_identity(real):
    img, box = real.frames[0], real.face_boxes[0]
    out = self_blend(img, box, 4, mask=np.zeros(img.shape[:2]))
    np.testing.assert_array_equal(out, img)


def test_one_mask_gives_source_inside_box(real):
    img, box = real.frames[0], real.face_boxes[0]
    recipe = sample_blend_recipe(np.random.default_rng(9), box)
    src = pseudo_source(img, recipe)
    ones = np.zeros(img.shape[:2])
    y0, x0, y1, x1 = box
    ones[y0:y1, x0:x1] = 1.0
    out = blend(src, img, ones)
    np.testing.assert_array_equal(out[y0:y1, x0:x1], src[y0:y1, x0:x1])
    np.testing.assert_array_equal(out[:y0], img[:y0])


def test_mask_range_and_face_confinement(real):
    box = real.face_boxes[0]
    for seed in range(10):
        m = blend_mask(real.frames[0].shape, sample_blend_recipe(np.random.default_rng(seed), box))
        assert m.min() >= 0.0 and m.max() <= 1.0
        y0, x0, y1, x1 = box
        outside = np.ones_like(m, bool)
        outside[y0:y1, x0:x1] = False
        assert not m[outside].any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_blend_convexity(seed):
    rng = np.random.default_rng(seed)
    src = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    tgt = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    out = blend(src, tgt, rng.uniform(size=(8, 8)))
    assert np.all(out >= np.minimum(src, tgt)) and np.all(out <= np.maximum(src, tgt))


def test_self_blend_is_visible_and_deterministic(real):
    img, box = real.frames[0], real.face_boxes[0]
    a = self_blend(img, box, [1, 2])
    assert np.array_equal(a, self_blend(img, box, [1, 2]))
    assert np.abs(a.astype(float) - img).max() > 0


def test_degenerate_box(real):
    with pytest.raises(DataError):
        self_blend(real.frames[0], (5, 5, 5, 9), 0)


# -- sampling indices ----------------------------------------------------------------------------


def test_even_indices_examples():
    assert even_indices(97, 8) == [0, 13, 27, 41, 54, 68, 82, 96]
    assert even_indices(5, 32) == [0, 1, 2, 3, 4]
    assert even_indices(10, 1) == [0]
    with pytest.raises(DataError):
        even_indices(0, 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.integers(1, 64))
def test_even_indices_properties(T, k):
    idx = even_indices(T, k)
    assert len(idx) == min(T, k)
    assert idx == sorted(set(idx))
    assert idx[0] == 0 and (len(idx) == 1 or idx[-1] == T - 1)


# -- corpus --------------------------------------------------------------------------------------


def test_corpus_structure_and_hash():
    c = generate_corpus(11, identities=2, frames=5)
    assert c.content_hash() == generate_corpus(11, identities=2, frames=5).content_hash()
    for g in c.groups:
        assert g.real.label == "real" and sorted(g.fakes) == list(METHODS)
        assert all(len(f) <= len(g.real) and f.identity == g.identity for f in g.fakes.values())


def test_corpus_round_trip(tmp_path):
    c = generate_corpus(12, identities=1, frames=3)
    index = save_corpus(c, tmp_path / "corpus")
    assert len(index.read_text().splitlines()) == 5
    back = load_corpus(tmp_path / "corpus")
    assert back.content_hash() == c.content_hash()
    with pytest.raises(DataError):
        load_corpus(tmp_path / "missing")
