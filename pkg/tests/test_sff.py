import math

import numpy as np
import pytest

from rgbt_decouple import tensor as T
from rgbt_decouple.sff import (
    SffParams, Source, attention_maps, descriptor_of, exchange_gate, fuse,
    gated_exchange, hidden_width, identity_mlp, merge_attention, sff_forward,
)
from rgbt_decouple.verify import gradcheck


def _params(c=4, seed=0):
    return SffParams.init(c, np.random.default_rng(seed))


def _with_identity_mlps(p):
    tensors = dict(p.tensors)
    for src in Source:
        for k, v in identity_mlp(p.channels).items():
            tensors[f"{src.value}.{k}"] = T.parameter(v)
    return SffParams(p.channels, tensors)


def test_hidden_width_floor():
    assert hidden_width(8) == 4
    assert hidden_width(32) == 8
    assert hidden_width(4) == 4


def test_descriptor_of_zero_map_is_zero():
    d = descriptor_of(np.zeros((4, 3, 3)), Source.RGB, _params())
    assert d.values.shape == (4,)
    assert np.array_equal(d.values.data, np.zeros(4))


def test_descriptor_of_constant_map_pools_to_constant():
    p = _with_identity_mlps(_params())
    f = np.broadcast_to(np.array([0.5, 1.0, 2.0, 3.0])[:, None, None], (4, 3, 3)).copy()
    assert np.allclose(descriptor_of(f, Source.THERMAL, p).values.data, [0.5, 1.0, 2.0, 3.0])


def test_descriptor_of_identity_mlp_matches_pooling_oracle():
    p = _with_identity_mlps(_params())
    f = np.abs(np.random.default_rng(1).normal(size=(2, 4, 5, 5)))
    ref = np.array([[0.5 * (f[n, c].mean() + f[n, c].max()) for c in range(4)] for n in range(2)])
    assert np.allclose(descriptor_of(f, Source.FUSED, p).values.data, ref, atol=1e-14)


def test_descriptor_channel_mismatch():
    with pytest.raises(T.ShapeError, match="channels"):
        descriptor_of(np.zeros((3, 2, 2)), Source.RGB, _params(4))


@pytest.mark.parametrize("r,t,expected", [
    (0.0, 5.0, 0.5),
    (1.0, -1.0, 1 - 1 / (1 + math.exp(1.0))),
    (3.0, 3.0, 1 - 1 / (1 + math.exp(-9.0))),
])
def test_exchange_gate_values(r, t, expected):
    g = exchange_gate(np.array([r]), np.array([t])).data[0]
    assert g == pytest.approx(expected, abs=1e-15)


def test_exchange_gate_known_decimals():
    assert exchange_gate(np.array([1.0]), np.array([-1.0])).data[0] == pytest.approx(0.7310585786, abs=1e-10)
    assert exchange_gate(np.array([3.0]), np.array([3.0])).data[0] == pytest.approx(1.234e-4, rel=1e-3)


def test_exchange_gate_sign_law_and_monotonicity():
    prod = np.linspace(-4, 4, 81)
    g = exchange_gate(prod, np.ones_like(prod)).data
    assert np.all(np.diff(g) < 0)
    assert np.all(g[prod < 0] > 0.5) and np.all(g[prod > 0] < 0.5)


def test_gated_exchange_half_injection_at_zero_product():
    f_rgb = np.ones((1, 2, 2))
    f_t = np.full((1, 2, 2), 4.0)
    a, b = gated_exchange(f_rgb, f_t, np.zeros(1), np.ones(1))
    assert np.array_equal(a.data, np.full((1, 2, 2), 3.0))
    assert np.array_equal(b.data, np.full((1, 2, 2), 4.5))


def test_gated_exchange_gate_is_shared():
    rng = np.random.default_rng(2)
    R, Tt = rng.normal(size=3), rng.normal(size=3)
    z = np.zeros((3, 2, 2))
    fr = rng.normal(size=(3, 2, 2))
    ft = rng.normal(size=(3, 2, 2))
    g = exchange_gate(R, Tt).data
    a, _ = gated_exchange(z, ft, R, Tt)
    _, b = gated_exchange(fr, z, R, Tt)
    assert np.allclose(a.data, g[:, None, None] * ft, atol=0)
    assert np.allclose(b.data, g[:, None, None] * fr, atol=0)


def test_gated_exchange_shape_mismatch():
    with pytest.raises(T.ShapeError):
        gated_exchange(np.zeros((2, 2, 2)), np.zeros((2, 3, 3)), np.zeros(2), np.zeros(2))


def test_attention_neutral_when_conv_output_constant():
    p = _params()
    p.tensors["merge.w"] = T.parameter(np.zeros((8, 8)))
    p.tensors["merge.b"] = T.parameter(np.random.default_rng(0).normal(size=(1, 8)))
    f1 = np.random.default_rng(3).normal(size=(4, 3, 3))
    f2 = np.random.default_rng(4).normal(size=(4, 3, 3))
    a, b = merge_attention(f1, f2, p)
    assert np.allclose(a.data, f1, atol=1e-15)
    assert np.allclose(b.data, f2, atol=1e-15)


def test_attention_maps_sum_to_hw():
    rng = np.random.default_rng(5)
    a, b = attention_maps(rng.normal(size=(2, 4, 3, 5)), rng.normal(size=(2, 4, 3, 5)), _params())
    assert np.allclose(a.data.sum(axis=(2, 3)), 15.0, atol=1e-10)
    assert np.allclose(b.data.sum(axis=(2, 3)), 15.0, atol=1e-10)


def test_merge_conv_is_per_pixel_matvec():
    rng = np.random.default_rng(6)
    p = _params()
    f1, f2 = rng.normal(size=(4, 2, 2)), rng.normal(size=(4, 2, 2))
    a, b = attention_maps(f1, f2, p)
    w, bias = p["merge.w"].data, p["merge.b"].data[0]
    logits = np.zeros((8, 2, 2))
    for i in range(2):
        for j in range(2):
            logits[:, i, j] = np.concatenate([f1[:, i, j], f2[:, i, j]]) @ w + bias
    e = np.exp(logits - logits.max(axis=(1, 2), keepdims=True))
    ref = 4 * e / e.sum(axis=(1, 2), keepdims=True)
    assert np.allclose(np.concatenate([a.data, b.data]), ref, atol=1e-13)


def test_fuse_identity_commutativity_and_sum():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3, 3))
    assert np.array_equal(fuse(a, np.zeros_like(a)).data, a)
    assert np.array_equal(fuse(a, b).data, fuse(b, a).data)
    assert np.array_equal(fuse(a, b).data, a + b)


def test_sff_zero_inputs_give_zero_output():
    out, R, Tt = sff_forward(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), _params())
    assert np.array_equal(out.data, np.zeros((4, 4, 4)))
    assert R.source is Source.RGB and Tt.source is Source.THERMAL


@pytest.mark.parametrize("shape", [(4, 2, 2), (4, 5, 3), (3, 4, 1, 7)])
def test_sff_output_shape(shape):
    c = shape[-3]
    rng = np.random.default_rng(8)
    out = sff_forward(rng.normal(size=shape), rng.normal(size=shape), _params(c))[0]
    assert out.shape == shape


def test_sff_swap_modalities_and_parameters():
    rng = np.random.default_rng(9)
    p = _params(4, seed=3)
    fr, ft = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2, 4, 3, 3))
    swapped = dict(p.tensors)
    for k in ("w1", "b1", "w2", "b2"):
        swapped[f"rgb.{k}"], swapped[f"thermal.{k}"] = p[f"thermal.{k}"], p[f"rgb.{k}"]
    perm = np.r_[4:8, 0:4]
    swapped["merge.w"] = T.Tensor(p["merge.w"].data[perm][:, perm])
    swapped["merge.b"] = T.Tensor(p["merge.b"].data[:, perm])
    q = SffParams(4, swapped)
    a = sff_forward(fr, ft, p)[0].data
    b = sff_forward(ft, fr, q)[0].data
    assert np.allclose(a, b, atol=1e-13)


def test_sff_gradient_of_sum_wrt_every_parameter():
    rng = np.random.default_rng(10)
    p = _params(4, seed=4)
    names = sorted(k for k in p.tensors if k != "merge.b")
    fr, ft = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2, 4, 3, 3))
    cot = rng.normal(size=(2, 4, 3, 3))

    def build(ts):
        q = SffParams(4, {**dict(zip(names, ts)), "merge.b": p["merge.b"]})
        return T.sum_(T.mul(sff_forward(fr, ft, q)[0], T.Tensor(cot)))

    assert gradcheck(build, [p[k].data.copy() for k in names]) < 1e-5


def test_merge_bias_gradient_vanishes():
    p = _params()
    rng = np.random.default_rng(11)
    y = sff_forward(rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2, 4, 3, 3)), p)[0]
    T.sum_(T.mul(y, T.Tensor(rng.normal(size=y.shape)))).backward()
    assert np.abs(p["merge.b"].grad).max() < 1e-12


def test_gate_override_zero_with_neutral_merge_is_addition():
    p = _params()
    p.tensors["merge.w"] = T.parameter(np.zeros((8, 8)))
    rng = np.random.default_rng(12)
    fr, ft = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3, 3))
    out = sff_forward(fr, ft, p, gate_override=0.0)[0]
    assert np.allclose(out.data, fr + ft, atol=1e-15)
