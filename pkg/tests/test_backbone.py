import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from effowt.autograd import Tensor, ops
from effowt.backbone import (DESK_BACKBONE, REFERENCE_BACKBONE, Attention, BackboneConfig,
                             ConfigurationError, ViTBackbone, backbone_forward, backbone_param_formula,
                             layer_param_count, layer_param_split)

from oracles import attention_ref

TINY = BackboneConfig(image_size=32, patch=8, dim=32, depth=3, heads=4)


def test_forward_shapes_and_one_tap_per_layer(rng):
    bb = ViTBackbone(TINY, rng).assign_names()
    taps = bb(Tensor(rng.random((2, 3, 32, 32))))
    assert taps.grid == 4 and len(taps) == 3
    assert taps.embedding.shape == (2, 16, 32)
    assert all(t.shape == (2, 16, 32) for t in taps.layers)


def test_wrong_image_shape_is_rejected(rng):
    bb = ViTBackbone(TINY, rng)
    with pytest.raises(ops.ShapeError):
        bb(Tensor(np.zeros((1, 3, 16, 16))))


def test_parameter_count_matches_layer_arithmetic(rng):
    bb = ViTBackbone(TINY, None)
    per_layer = sum(layer_param_count(TINY.dim, TINY.mlp_ratio).values())
    embed = 3 * TINY.patch ** 2 * TINY.dim + TINY.dim + TINY.tokens * TINY.dim
    assert bb.num_params() == TINY.depth * per_layer + embed


def test_reference_backbone_size_close_to_formula():
    n = ViTBackbone(REFERENCE_BACKBONE, None).num_params()
    approx = backbone_param_formula(REFERENCE_BACKBONE)
    assert abs(n - approx) / approx < 0.01


def test_layer_split_mlp_ratio_four():
    s = layer_param_split(REFERENCE_BACKBONE)
    assert abs(s["mha"] - 0.333) < 0.005
    assert abs(s["mlp"] - 0.666) < 0.005
    assert abs(s["ln"] - 0.001) < 0.005
    assert abs(sum(s.values()) - 1.0) < 1e-12


def test_layer_split_mlp_ratio_one_gives_two_thirds_attention():
    s = layer_param_split(BackboneConfig(image_size=256, patch=16, dim=1024, depth=1, heads=16, mlp_ratio=1))
    assert abs(s["mha"] - 2 / 3) < 0.005


@given(st.sampled_from([8, 16, 32, 64, 128]), st.integers(1, 6))
def test_split_fractions_sum_to_one(dim, ratio):
    counts = layer_param_count(dim, ratio)
    assert counts["mha"] == 4 * dim * dim + 4 * dim
    assert counts["mlp"] == 2 * ratio * dim * dim + ratio * dim + dim
    assert counts["ln"] == 4 * dim


@pytest.mark.parametrize("chunk", [None, 3, 5, 16])
def test_attention_matches_reference_for_any_chunk(chunk, rng):
    att = Attention(16, 4, rng, chunk=chunk)
    x = rng.standard_normal((2, 10, 16))
    got = att(Tensor(x)).data
    ref = attention_ref(x, att.qkv.weight.data, att.qkv.bias.data, att.proj.weight.data,
                        att.proj.bias.data, 4)
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_frozen_strategy_refuses_trainable_backbone(rng):
    bb = ViTBackbone(TINY, rng).assign_names()
    x = Tensor(rng.random((1, 3, 32, 32)))
    with pytest.raises(ConfigurationError, match="frozen backbone"):
        backbone_forward(x, bb, "side")
    for p in bb.parameters():
        p.trainable = False
    backbone_forward(x, bb, "side")
    backbone_forward(x, bb, "full")


@pytest.mark.parametrize("kw", [dict(image_size=30), dict(dim=30), dict(mlp_ratio=0), dict(depth=0)])
def test_invalid_backbone_configs(kw):
    base = dict(image_size=32, patch=8, dim=32, depth=2, heads=4)
    with pytest.raises(ConfigurationError):
        BackboneConfig(**{**base, **kw})


def test_desk_backbone_grid():
    assert DESK_BACKBONE.grid == 8 and DESK_BACKBONE.head_dim == 32
