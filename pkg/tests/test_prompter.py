"""Prompt encoder: channel widths, shapes, residual structure, sensitivity."""

import pytest
import torch

from depthprompt.backbone import backbone_config
from depthprompt.errors import ContractError
from depthprompt.prompter import DeepBlock, Prompter, encode_prompts, prompt_channels

TINY_CHANNELS = (32, 64, 128, 256)


def _depth_maps(size=64, seed=0, batch=1):
    torch.manual_seed(seed)
    return [
        torch.rand(batch, 1, size // s, size // s) for s in (1, 2, 4)
    ]


def test_prompt_channels_mirror_reassembly():
    assert prompt_channels(backbone_config("tiny")) == (32, 64, 128, 256)
    assert prompt_channels(backbone_config("vit_l")) == (96, 192, 384, 768)
    for name in ("tiny", "vit_s", "vit_b", "vit_l"):
        assert len(prompt_channels(backbone_config(name))) == 4


def test_prompter_shapes():
    prompter = Prompter(TINY_CHANNELS)
    psi = prompter(_depth_maps(64))
    got = [tuple(p.shape) for p in psi]
    assert got == [(1, 32, 16, 16), (1, 64, 8, 8), (1, 128, 4, 4), (1, 256, 2, 2)]
    for p in psi:
        assert torch.isfinite(p).all()


def test_prompter_scales_with_tile():
    prompter = Prompter(TINY_CHANNELS)
    psi = prompter(_depth_maps(128))
    assert [tuple(p.shape[2:]) for p in psi] == [(32, 32), (16, 16), (8, 8), (4, 4)]


def test_zero_depth_zero_bias_gives_zero_prompts():
    torch.manual_seed(0)
    prompter = Prompter(TINY_CHANNELS)
    with torch.no_grad():
        for module in prompter.modules():
            if isinstance(module, torch.nn.Conv2d) and module.bias is not None:
                module.bias.zero_()
    zeros = [torch.zeros(1, 1, 64 // s, 64 // s) for s in (1, 2, 4)]
    psi = prompter(zeros)
    for p in psi:
        assert torch.all(p == 0)


def test_deep_block_residual_identity():
    torch.manual_seed(1)
    block = DeepBlock(32, 64, 32, downsample=True)
    with torch.no_grad():
        block.transform1.weight.zero_()
        block.transform1.bias.zero_()
        block.transform2.weight.zero_()
        block.transform2.bias.zero_()
    prev = torch.randn(1, 32, 16, 16)
    shallow = torch.randn(1, 32, 16, 16)
    assert torch.equal(block(prev, shallow), block.form_input(prev, shallow))


def test_prompter_sensitive_to_coarsest_map():
    torch.manual_seed(2)
    prompter = Prompter(TINY_CHANNELS)
    maps_a = _depth_maps(64, seed=3)
    maps_b = [m.clone() for m in maps_a]
    maps_b[2] = torch.rand_like(maps_b[2])
    psi_a = prompter(maps_a)
    psi_b = prompter(maps_b)
    diffs = [float((a - b).detach().abs().max()) for a, b in zip(psi_a, psi_b)]
    assert max(diffs) > 0.0


def test_prompter_deterministic():
    prompter = Prompter(TINY_CHANNELS)
    maps = _depth_maps(64, seed=4)
    a = prompter(maps)
    b = prompter(maps)
    for x, y in zip(a, b):
        assert torch.equal(x, y)


def test_prompter_contract_errors():
    prompter = Prompter(TINY_CHANNELS)
    with pytest.raises(ContractError):
        prompter(_depth_maps()[:2])
    bad = _depth_maps()
    bad[1] = torch.rand(1, 2, 32, 32)
    with pytest.raises(ContractError):
        prompter(bad)
    bad = _depth_maps()
    bad[2] = bad[2] + 5.0
    with pytest.raises(ContractError):
        prompter(bad)
    bad = _depth_maps()
    bad[1] = torch.rand(1, 1, 30, 30)
    with pytest.raises(ContractError):
        prompter(bad)
    with pytest.raises(ContractError):
        Prompter((32, 64, 128))


def test_encode_prompts_wrapper():
    prompter = Prompter(TINY_CHANNELS)
    maps = _depth_maps(64, seed=5)
    psi = encode_prompts(maps, prompter)
    assert len(psi) == 4
