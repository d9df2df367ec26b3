"""Weight bundle tests: shape contract, seeded init, persistence, builders."""

import numpy as np
import pytest

from bevnext.config import SceneConfig
from bevnext.errors import FormatError
from bevnext.kernels import conv2d
from bevnext.weights import (
    HEATMAP_BIAS,
    WeightBundle,
    attn_spec,
    backbone_specs,
    depth_head_spec,
    depth_mlp_spec,
    expected_shapes,
    fusion_config,
    heatmap_spec,
    init_bundle,
    load_weights,
    post_specs,
    regression_heads,
    save_weights,
    validate_bundle,
    zero_bundle,
)

DESK = SceneConfig()


# ---------------------------------------------------------------- shape contract


def test_expected_shapes_desk_counts():
    shapes = expected_shapes(DESK)
    # conv pairs: 3 backbone + depth head + 3 reduces + 2 cascades + final
    # + post down/merge + heatmap = 13; plus queries and 12 linear pairs
    assert len(shapes) == 13 * 2 + 1 + 12 * 2
    assert shapes["backbone.conv1.w"] == (8, 3, 3, 3)
    assert shapes["depth_head.w"] == (8, 32, 1, 1)
    assert shapes["res2fusion.reduce.0.w"] == (32, 96, 1, 1)
    assert shapes["res2fusion.cascade.2.w"] == (32, 32, 3, 3)
    assert shapes["res2fusion.final.w"] == (32, 96, 1, 1)
    assert shapes["decoder.queries"] == (49, 32)
    assert shapes["decoder.attn.offset.w"] == (4 * 2 * 2, 32)
    assert shapes["decoder.attn.weight.w"] == (4 * 2, 32)
    assert shapes["decoder.depth_mlp.0.w"] == (32, 8)
    assert shapes["decoder.head.size.w"] == (3, 32)


def test_expected_shapes_track_config():
    cfg = SceneConfig(frames=4, window=4, channels=16, classes=5, heights=(0.0,), points=3)
    shapes = expected_shapes(cfg)
    assert cfg.groups == 1
    assert "res2fusion.cascade.1.w" not in shapes
    assert shapes["res2fusion.reduce.0.w"] == (16, 64, 1, 1)
    assert shapes["res2fusion.final.w"] == (16, 16, 1, 1)
    assert shapes["decoder.heatmap.w"] == (5, 16, 3, 3)
    assert shapes["decoder.attn.offset.w"] == (6, 16)


# ---------------------------------------------------------------- initialization


def test_init_bundle_deterministic_per_seed():
    a, b = init_bundle(DESK, 7), init_bundle(DESK, 7)
    assert a.tensors.keys() == b.tensors.keys()
    for name in a.tensors:
        assert np.array_equal(a[name], b[name])
    c = init_bundle(DESK, 8)
    assert any(not np.array_equal(a[n], c[n]) for n in a.tensors if n.endswith(".w"))


def test_init_bundle_biases_zero_except_heatmap():
    bundle = init_bundle(DESK, 7)
    for name, arr in bundle.tensors.items():
        if name == "decoder.heatmap.b":
            assert np.all(arr == np.float32(HEATMAP_BIAS))
        elif name.endswith(".b"):
            assert np.all(arr == 0.0), name
        else:
            assert np.any(arr != 0.0), name


def test_zero_bundle_is_all_zero_and_valid():
    bundle = zero_bundle(DESK)
    validate_bundle(bundle, DESK)
    assert all(np.all(arr == 0.0) for arr in bundle.tensors.values())


# ---------------------------------------------------------------- persistence


def test_save_load_round_trip_bit_exact(tmp_path):
    bundle = init_bundle(DESK, 7)
    path = tmp_path / "w.bvnx"
    save_weights(bundle, path)
    back = load_weights(path, DESK)
    assert back.tensors.keys() == bundle.tensors.keys()
    for name in bundle.tensors:
        assert back[name].dtype == np.float32
        assert np.array_equal(back[name], bundle[name])


def test_load_rejects_unknown_name_listing_expected(tmp_path):
    bundle = init_bundle(DESK, 7)
    bundle.tensors["bogus.w"] = np.zeros((1,), np.float32)
    path = tmp_path / "w.bvnx"
    save_weights(bundle, path)
    with pytest.raises(FormatError) as err:
        load_weights(path, DESK)
    assert "bogus.w" in str(err.value)
    assert "backbone.conv1.w" in str(err.value)  # expected names are listed


def test_load_rejects_missing_key_by_dotted_path(tmp_path):
    bundle = init_bundle(DESK, 7)
    del bundle.tensors["decoder.head.yaw.b"]
    path = tmp_path / "w.bvnx"
    save_weights(bundle, path)
    with pytest.raises(FormatError, match="decoder.head.yaw.b"):
        load_weights(path, DESK)


def test_load_rejects_shape_mismatch_by_name(tmp_path):
    bundle = init_bundle(DESK, 7)
    bundle.tensors["depth_head.w"] = np.zeros((8, 32, 3, 3), np.float32)
    path = tmp_path / "w.bvnx"
    save_weights(bundle, path)
    with pytest.raises(FormatError, match="depth_head.w"):
        load_weights(path, DESK)


def test_load_rejects_corrupt_magic_at_offset_zero(tmp_path):
    path = tmp_path / "w.bvnx"
    path.write_bytes(b"XXXX" + bytes(64))
    with pytest.raises(FormatError, match="offset 0"):
        load_weights(path, DESK)


def test_load_rejects_truncated_file(tmp_path):
    path = tmp_path / "w.bvnx"
    save_weights(init_bundle(DESK, 7), path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(FormatError, match="truncated"):
        load_weights(path, DESK)


def test_load_missing_file_is_format_error(tmp_path):
    with pytest.raises(FormatError, match="cannot read"):
        load_weights(tmp_path / "absent.bvnx", DESK)


# ---------------------------------------------------------------- builders


def test_backbone_specs_chain_and_stride():
    specs = backbone_specs(init_bundle(DESK, 7), DESK)
    chain = [(s.in_channels, s.out_channels) for s in specs]
    assert chain == [(3, 8), (8, 16), (16, 32)]
    assert all(s.stride == 2 and s.kernel_size == 3 for s in specs)


def test_depth_head_maps_channels_to_bins():
    spec = depth_head_spec(init_bundle(DESK, 7), DESK)
    assert (spec.in_channels, spec.out_channels, spec.kernel_size) == (32, 8, 1)


def test_fusion_config_matches_group_arithmetic():
    cfg = SceneConfig(frames=9, window=3)
    fc = fusion_config(init_bundle(cfg, 7), cfg)
    assert fc.groups == 3
    assert fc.window == 3
    assert fc.reduce_specs[0].in_channels == 3 * 32
    assert len(fc.cascade_specs) == 2
    assert fc.final_spec.in_channels == 3 * 32
    assert fc.cascade_input == cfg.cascade_input


def test_post_and_heatmap_specs():
    bundle = init_bundle(DESK, 7)
    down, merge = post_specs(bundle, DESK)
    assert down.stride == 2 and down.kernel_size == 3
    assert merge.in_channels == 64 and merge.out_channels == 32
    hm = heatmap_spec(bundle, DESK)
    assert hm.out_channels == DESK.classes


def test_attn_and_mlp_builders():
    bundle = init_bundle(DESK, 7)
    attn = attn_spec(bundle, DESK)
    assert attn.n_ref == len(DESK.heights) and attn.n_points == DESK.points
    assert attn.channels == 32
    mlp = depth_mlp_spec(bundle)
    assert mlp.in_width == DESK.depth_bins and mlp.out_width == 32
    heads = regression_heads(bundle)
    assert heads.shared.activations == ["relu"]
    assert heads.size.out_width == 3


def test_zero_weights_feed_a_zero_conv_chain():
    specs = backbone_specs(zero_bundle(DESK), DESK)
    x = np.ones((1, 3, 16, 16), np.float32)
    for spec in specs:
        x = conv2d(x, spec)
    assert np.all(x == 0.0)
