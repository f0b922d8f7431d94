"""Frozen ViT backbone: presets, shapes, parameter math, weight files."""

import numpy as np
import pytest
import torch

from depthprompt.backbone import (
    Backbone,
    BackboneConfig,
    backbone_config,
    build_backbone,
    encoder_param_count,
    expected_level_shapes,
    extract_features,
    load_weight_file,
    parameter_checksum,
    parameter_report,
    save_weight_file,
    tile_to_tensor,
)
from depthprompt.data import ImageTile, SceneSpec, generate_scene
from depthprompt.errors import ConfigError, InputError


def _tile(size=64, seed=0):
    tile, _, _ = generate_scene(SceneSpec(seed=seed, size=size))
    return tile


def test_tiny_preset_pinned_values():
    cfg = backbone_config("tiny")
    assert cfg.patch_size == 8
    assert cfg.embed_dim == 64
    assert cfg.depth == 8
    assert cfg.num_heads == 4
    assert cfg.tap_indices == (1, 3, 5, 7)
    assert cfg.reassembly_channels == (32, 64, 128, 256)


def test_config_validation():
    with pytest.raises(ConfigError):
        backbone_config("huge")
    with pytest.raises(ConfigError):
        BackboneConfig(
            name="x", patch_size=8, embed_dim=64, depth=4, num_heads=4,
            tap_indices=(0, 1, 2, 4), reassembly_channels=(32, 64, 128, 256),
        )
    with pytest.raises(ConfigError):
        BackboneConfig(
            name="x", patch_size=8, embed_dim=64, depth=8, num_heads=4,
            tap_indices=(3, 1, 5, 7), reassembly_channels=(32, 64, 128, 256),
        )
    with pytest.raises(ConfigError):
        BackboneConfig(
            name="x", patch_size=8, embed_dim=64, depth=8, num_heads=4,
            tap_indices=(1, 3, 5, 7), reassembly_channels=(32, 64, 128),
        )


def test_encoder_param_count_matches_construction():
    cfg = backbone_config("tiny")
    backbone = build_backbone(cfg, seed=0)
    actual = sum(p.numel() for p in backbone.encoder.parameters())
    assert actual == encoder_param_count(cfg) == 412416


def test_encoder_param_formula_vit_l():
    cfg = backbone_config("vit_l")
    # hand sum: patch 3*256*1024+1024, cls 1024, 24 blocks, final norm
    patch = 3 * 16 * 16 * 1024 + 1024
    blocks = 24 * (12 * 1024 * 1024 + 13 * 1024)
    assert encoder_param_count(cfg) == patch + 1024 + blocks + 2048


def test_tiny_pyramid_shapes():
    cfg = backbone_config("tiny")
    pyramid = extract_features(_tile(64), cfg, seed=0)
    assert pyramid.source == "encoder"
    got = [tuple(f.shape) for f in pyramid]
    assert got == [(1, 32, 16, 16), (1, 64, 8, 8), (1, 128, 4, 4), (1, 256, 2, 2)]
    for f in pyramid:
        assert torch.isfinite(f).all()


def test_vit_s_pyramid_shapes():
    cfg = backbone_config("vit_s")
    pyramid = extract_features(_tile(64), cfg, seed=0)
    got = [tuple(f.shape) for f in pyramid]
    assert got == [(1, 48, 16, 16), (1, 96, 8, 8), (1, 192, 4, 4), (1, 384, 2, 2)]


def test_expected_level_shapes_vit_l_512():
    cfg = backbone_config("vit_l")
    shapes = expected_level_shapes(cfg, 512, 512)
    assert shapes[0] == (128, 128, 96)
    assert shapes == [(128, 128, 96), (64, 64, 192), (32, 32, 384), (16, 16, 768)]


def test_reassemble_zero_tokens_zero_bias():
    cfg = backbone_config("tiny")
    backbone = build_backbone(cfg, seed=1)
    for proj in backbone.reassembly.projections:
        with torch.no_grad():
            proj.bias.zero_()
    tokens = torch.zeros(1, 64, 64)  # 8x8 grid of zero tokens
    for level in range(4):
        out = backbone.reassembly.reassemble(tokens, level, (8, 8))
        assert torch.all(out == 0)


def test_reassemble_token_count_mismatch():
    cfg = backbone_config("tiny")
    backbone = build_backbone(cfg, seed=1)
    with pytest.raises(InputError):
        backbone.reassembly.reassemble(torch.zeros(1, 60, 64), 0, (8, 8))


def test_backbone_rejects_bad_input():
    backbone = build_backbone(backbone_config("tiny"), seed=0)
    with pytest.raises(InputError):
        backbone(torch.zeros(1, 3, 50, 64))
    with pytest.raises(InputError):
        backbone(torch.zeros(1, 4, 64, 64))


def test_backbone_frozen_and_deterministic():
    cfg = backbone_config("tiny")
    b1 = build_backbone(cfg, seed=7)
    b2 = build_backbone(cfg, seed=7)
    tile = _tile(64, seed=2)
    f1 = b1(tile_to_tensor(tile))
    f2 = b2(tile_to_tensor(tile))
    for a, b in zip(f1, f2):
        assert torch.equal(a, b)
    assert parameter_checksum(b1) == parameter_checksum(b2)
    for p in b1.parameters():
        assert not p.requires_grad
    # train(True) must not unfreeze or flip module mode
    b1.train(True)
    assert not b1.training


def test_parameter_report_backbone():
    backbone = build_backbone(backbone_config("tiny"), seed=0)
    report = parameter_report(backbone)
    assert report["encoder"]["parameters"] == 412416
    assert report["encoder"]["trainable"] is False
    assert report["reassembly"]["trainable"] is False
    reassembly = sum(64 * c + c for c in (32, 64, 128, 256))
    assert report["reassembly"]["parameters"] == reassembly


def test_weight_file_roundtrip(tmp_path):
    cfg = backbone_config("tiny")
    b1 = build_backbone(cfg, seed=3)
    path = str(tmp_path / "weights.npz")
    save_weight_file(b1, path)
    b2 = build_backbone(cfg, seed=99)
    assert parameter_checksum(b1) != parameter_checksum(b2)
    load_weight_file(b2, path)
    assert parameter_checksum(b1) == parameter_checksum(b2)


def test_weight_file_shape_mismatch(tmp_path):
    b_small = build_backbone(backbone_config("tiny"), seed=0)
    b_other = build_backbone(backbone_config("vit_s"), seed=0)
    path = str(tmp_path / "weights.npz")
    save_weight_file(b_small, path)
    with pytest.raises(ConfigError):
        load_weight_file(b_other, path)
    garbage = tmp_path / "garbage.npz"
    garbage.write_bytes(b"not an archive")
    with pytest.raises(ConfigError):
        load_weight_file(b_small, str(garbage))


def test_features_scale_with_tile_size():
    cfg = backbone_config("tiny")
    backbone = build_backbone(cfg, seed=0)
    for size in (32, 96, 128):
        pyramid = backbone(tile_to_tensor(_tile(size, seed=1)))
        want = expected_level_shapes(cfg, size, size)
        got = [(f.shape[2], f.shape[3], f.shape[1]) for f in pyramid]
        assert got == want
