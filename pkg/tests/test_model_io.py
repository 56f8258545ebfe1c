import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vlffd.config import ModelConfig, VlfmConfig
from vlffd.encoders import Vocabulary
from vlffd.errors import DataError, PipelineOrderError, ShapeError
from vlffd.imaging import crop_face, read_pgm16, read_ppm, to_unit, write_pgm16, write_ppm
from vlffd.model import ModelState


@pytest.fixture
def state():
    s = ModelState.create(ModelConfig(), VlfmConfig(), 5)
    s.init_text_pathway(Vocabulary.build(["Yes, odd.", "No, fine."]))
    s.completed = [1, 2]
    return s


def test_checkpoint_round_trip(tmp_path, state):
    manifest = state.save(tmp_path / "ck")
    back = ModelState.load(tmp_path / "ck", state.model_cfg, state.vlfm_cfg)
    assert back.hashes() == state.hashes()
    assert back.completed == [1, 2]
    assert back.vocab.tokens == state.vocab.tokens
    np.testing.assert_array_equal(back.prompt, state.prompt)
    assert set(manifest["groups"]) == {"detector", "vlfm", "text_pathway"}


def test_checkpoint_tamper_detected(tmp_path, state):
    state.save(tmp_path / "ck")
    blob = bytearray((tmp_path / "ck" / "vlfm.vlft").read_bytes())
    blob[-1] ^= 0xFF
    (tmp_path / "ck" / "vlfm.vlft").write_bytes(bytes(blob))
    with pytest.raises(DataError):
        ModelState.load(tmp_path / "ck", state.model_cfg, state.vlfm_cfg)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(PipelineOrderError):
        ModelState.load(tmp_path / "none", ModelConfig(), VlfmConfig())


def test_clone_is_deep(state):
    twin = state.clone()
    twin.groups["vlfm"]["cls.b"].data[0] += 1.0
    assert twin.hashes()["vlfm"] != state.hashes()["vlfm"]


def test_group_init_is_per_group(state):
    other = ModelState.create(ModelConfig(), VlfmConfig(layers=3), 5)
    assert other.hashes()["detector"] == state.hashes()["detector"]


# -- image files -----------------------------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3))))
def test_ppm_round_trip(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("ppm") / "x.ppm"
    write_ppm(path, img)
    np.testing.assert_array_equal(read_ppm(path), img)


def test_pgm16_round_trip_and_header(tmp_path):
    heat = np.array([[0.0, 0.25], [0.5, 1.0]])
    write_pgm16(tmp_path / "h.pgm", heat)
    raw = (tmp_path / "h.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n65535\n") and len(raw) == len(b"P5\n2 2\n65535\n") + 8
    np.testing.assert_allclose(read_pgm16(tmp_path / "h.pgm"), heat, atol=1 / 65535)
    with pytest.raises(DataError):
        write_pgm16(tmp_path / "bad.pgm", np.array([[1.5]]))


def test_crop_face_shape_and_range():
    img = np.random.default_rng(0).integers(0, 256, (40, 40, 3), dtype=np.uint8)
    out = crop_face(img, (8, 8, 32, 32), 0.125, 32)
    assert out.shape == (32, 32, 3)
    unit = to_unit(out)
    assert unit.min() >= -0.5 and unit.max() <= 0.5
    with pytest.raises((DataError, ShapeError)):
        crop_face(img, (8, 8, 8, 32), 0.1, 32)
