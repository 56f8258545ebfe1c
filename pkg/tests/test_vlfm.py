import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlffd.config import VlfmConfig
from vlffd.errors import ConfigError, ShapeError
from vlffd.tensor import Tensor, cross_entropy, grad_check, no_grad
from vlffd.vlfm import (
    argmax_cell, attention_map, classify, cross_attention, fusion_layer, gap1d, init_vlfm,
    joint_representation, normalize_map, vlfm_forward,
)


def _params(d=8, seed=0, **kw):
    cfg = VlfmConfig(**kw)
    return init_vlfm(d, cfg, np.random.default_rng(seed)), cfg


def _tokens(rng, n, d):
    return Tensor(rng.normal(size=(n, d)))


# -- cross attention -----------------------------------------------------------------------


def test_single_key_returns_value_projection():
    rng = np.random.default_rng(0)
    wq, wk, wv = (Tensor(rng.normal(size=(4, 4))) for _ in range(3))
    kv = _tokens(rng, 1, 4)
    out = cross_attention(_tokens(rng, 3, 4), kv, wq, wk, wv, n_heads=2)
    np.testing.assert_allclose(out.data, np.repeat((kv.data @ wv.data), 3, axis=0), atol=1e-12)


@pytest.mark.parametrize("x", [-2.0, -1.0, 0.0, 1.0, 2.0])
def test_closed_form_tanh(x):
    eye = Tensor([[1.0]])
    out = cross_attention(Tensor([[x]]), Tensor([[1.0], [-1.0]]), eye, eye, eye, n_heads=1)
    assert abs(out.item() - np.tanh(x)) < 1e-9


def test_key_value_permutation_invariance():
    rng = np.random.default_rng(1)
    wq, wk, wv = (Tensor(rng.normal(size=(8, 8))) for _ in range(3))
    q, kv = _tokens(rng, 3, 8), rng.normal(size=(5, 8))
    perm = rng.permutation(5)
    a = cross_attention(q, Tensor(kv), wq, wk, wv, 4).data
    b = cross_attention(q, Tensor(kv[perm]), wq, wk, wv, 4).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_heads_must_divide_width():
    rng = np.random.default_rng(2)
    w = Tensor(rng.normal(size=(6, 6)))
    with pytest.raises(ConfigError):
        cross_attention(_tokens(rng, 2, 6), _tokens(rng, 2, 6), w, w, w, n_heads=4)


def test_multihead_matches_per_head_reference():
    rng = np.random.default_rng(3)
    d, H = 8, 2
    W = [rng.normal(size=(d, d)) for _ in range(3)]
    Q, KV = rng.normal(size=(3, d)), rng.normal(size=(4, d))
    out = cross_attention(Tensor(Q), Tensor(KV), *(Tensor(w) for w in W), n_heads=H).data
    dh = d // H
    ref = []
    for h in range(H):
        s = slice(h * dh, (h + 1) * dh)
        q, k, v = Q @ W[0][:, s], KV @ W[1][:, s], KV @ W[2][:, s]
        z = q @ k.T / np.sqrt(dh)
        p = np.exp(z - z.max(axis=1, keepdims=True))
        ref.append(p / p.sum(axis=1, keepdims=True) @ v)
    np.testing.assert_allclose(out, np.concatenate(ref, axis=1), atol=1e-12)


# -- fusion layer ----------------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_fusion_layer_preserves_shapes(n_c, n_l, seed):
    rng = np.random.default_rng(seed)
    p, cfg = _params()
    E_C, E_L, _ = fusion_layer(_tokens(rng, n_c, 8), _tokens(rng, n_l, 8), p, 0, cfg)
    assert E_C.shape == (n_c, 8) and E_L.shape == (n_l, 8)


def test_fusion_layer_width_mismatch():
    rng = np.random.default_rng(4)
    p, cfg = _params()
    with pytest.raises(ShapeError):
        fusion_layer(_tokens(rng, 2, 8), _tokens(rng, 2, 4), p, 0, cfg)


def test_joint_permutation_equivariance():
    rng = np.random.default_rng(5)
    p, cfg = _params()
    E_C, E_L = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    pc, pl = rng.permutation(3), rng.permutation(3)
    a_c, a_l, _ = fusion_layer(Tensor(E_C), Tensor(E_L), p, 0, cfg)
    b_c, b_l, _ = fusion_layer(Tensor(E_C[pc]), Tensor(E_L[pl]), p, 0, cfg)
    np.testing.assert_allclose(b_c.data, a_c.data[pc], atol=1e-12)
    np.testing.assert_allclose(b_l.data, a_l.data[pl], atol=1e-12)


def test_no_cross_attention_isolates_branches():
    rng = np.random.default_rng(6)
    p, cfg = _params(img_to_text=False, text_to_img=False)
    E_C = _tokens(rng, 4, 8)
    a = vlfm_forward(E_C, _tokens(rng, 3, 8), p, cfg).E_C.data
    b = vlfm_forward(E_C, _tokens(rng, 5, 8), p, cfg).E_C.data
    np.testing.assert_array_equal(gap1d(Tensor(a)).data, gap1d(Tensor(b)).data)


@pytest.mark.parametrize("layers", [1, 2, 3, 4])
def test_any_depth_runs(layers):
    rng = np.random.default_rng(layers)
    p, cfg = _params(layers=layers)
    out = vlfm_forward(_tokens(rng, 4, 8), _tokens(rng, 4, 8), p, cfg)
    assert len(out.traces) == layers and 0 <= out.score.item() <= 1


def test_attention_rows_sum_to_one_batched():
    rng = np.random.default_rng(7)
    p, cfg = _params()
    out = vlfm_forward(Tensor(rng.normal(size=(3, 4, 8))), Tensor(rng.normal(size=(3, 5, 8))), p, cfg)
    for tr in out.traces:
        np.testing.assert_allclose(tr.img_to_text.data.sum(-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(tr.text_to_img.data.sum(-1), 1.0, atol=1e-12)


# -- pooling, fusion, classification --------------------------------------------------------------


def test_gap1d_examples():
    np.testing.assert_array_equal(gap1d(Tensor([[1.0, 2.0], [3.0, 4.0]])).data, [2.0, 3.0])
    np.testing.assert_array_equal(gap1d(Tensor([[5.0, 6.0]])).data, [5.0, 6.0])


def test_joint_modes():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
    assert joint_representation(a, b, "elementwise_product").data.tolist() == [3.0, 8.0]
    assert joint_representation(a, b, "addition").data.tolist() == [4.0, 6.0]
    assert joint_representation(a, b, "concatenation").data.tolist() == [1.0, 2.0, 3.0, 4.0]
    with pytest.raises(ShapeError):
        joint_representation(a, Tensor([1.0, 2.0, 3.0]), "addition")
    with pytest.raises(ConfigError):
        joint_representation(a, b, "dot")


def test_classify_examples():
    zeros = {"cls.w": Tensor(np.zeros((2, 2))), "cls.b": Tensor(np.zeros(2))}
    assert classify(Tensor([1.0, -1.0]), zeros).item() == 0.5
    sat = {"cls.w": Tensor(np.zeros((2, 2))), "cls.b": Tensor([0.0, 20.0])}
    assert classify(Tensor([0.3, 0.1]), sat).item() > 0.999


@pytest.mark.parametrize("mode", ["elementwise_product", "addition", "concatenation"])
def test_full_vlfm_grad_check_all_groups(mode):
    rng = np.random.default_rng(8)
    p, cfg = _params(fusion_mode=mode, n_heads=2)
    E_C, E_L = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))

    def loss_wrt(name):
        def f(t):
            q = dict(p)
            q[name] = t
            return cross_entropy(vlfm_forward(Tensor(E_C), Tensor(E_L), q, cfg).logits.reshape(1, 2), [1])
        return f

    for name in ("layer0.i2t.wq", "layer1.t2i.wv", "layer0.mlp_img.w1", "layer1.mlp_text.b2", "cls.w"):
        assert grad_check(loss_wrt(name), p[name], eps=1e-6) < 1e-4, name


# -- attention maps ---------------------------------------------------------------------------------


def test_attention_map_mass_and_normalization():
    rng = np.random.default_rng(9)
    p, cfg = _params()
    E_C, E_L = _tokens(rng, 4, 8), _tokens(rng, 3, 8)
    raw = attention_map(E_C, E_L, p, cfg, (2, 2), normalize=False)
    assert abs(raw.sum() - 1.0) < 1e-12
    heat = attention_map(E_C, E_L, p, cfg, (2, 2))
    assert heat.min() == 0.0 and heat.max() == 1.0
    with pytest.raises(ShapeError):
        attention_map(E_C, E_L, p, cfg, (3, 2))


def test_attention_map_single_cell():
    rng = np.random.default_rng(10)
    p, cfg = _params()
    E_C, E_L = _tokens(rng, 1, 8), _tokens(rng, 2, 8)
    assert attention_map(E_C, E_L, p, cfg, (1, 1), normalize=False).tolist() == [[1.0]]
    assert attention_map(E_C, E_L, p, cfg, (1, 1)).tolist() == [[0.0]]


def test_normalize_constant_and_argmax_ties():
    assert normalize_map(np.full((2, 3), 0.4)).tolist() == [[0.0] * 3] * 2
    assert argmax_cell(np.array([[0.0, 1.0], [1.0, 0.0]])) == (0, 1)


def test_attention_map_needs_text_to_image():
    rng = np.random.default_rng(11)
    p, cfg = _params(text_to_img=False)
    with pytest.raises(ConfigError):
        attention_map(_tokens(rng, 4, 8), _tokens(rng, 2, 8), p, cfg, (2, 2))


def test_batched_equals_single():
    rng = np.random.default_rng(12)
    p, cfg = _params()
    E_C, E_L = rng.normal(size=(2, 4, 8)), rng.normal(size=(2, 3, 8))
    with no_grad():
        batched = vlfm_forward(Tensor(E_C), Tensor(E_L), p, cfg).score.data
        single = [vlfm_forward(Tensor(E_C[i]), Tensor(E_L[i]), p, cfg).score.item() for i in range(2)]
    np.testing.assert_allclose(batched, single, atol=1e-12)
