"""Encodes the three-scale depth maps into four-scale depth prompts.

A shallow conv block consumes the depth maps stacked onto the stride-4
grid; four deep blocks then emit psi_0..psi_3 at strides 4/8/16/32. Each
deep block forms its input by strided projection of the previous output
plus a skip from the shallow features (pooled, and 1x1-projected only when
widths differ), then applies a shape-preserving residual transform:
output = input + transform(input).
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneConfig
from .errors import ContractError


def prompt_channels(cfg: BackboneConfig) -> Tuple[int, int, int, int]:
    """Prompt widths mirror the feature pyramid level-for-level."""
    return tuple(cfg.reassembly_channels)


@dataclass
class PromptPyramid:
    """Four prompt maps psi aligned to the feature pyramid strides."""

    prompts: List[torch.Tensor]

    def __post_init__(self):
        if len(self.prompts) != 4:
            raise ContractError("prompt pyramid must have exactly 4 levels")
        for i in range(1, 4):
            prev, cur = self.prompts[i - 1], self.prompts[i]
            if prev.shape[2] != 2 * cur.shape[2] or prev.shape[3] != 2 * cur.shape[3]:
                raise ContractError("prompt levels must halve spatially")

    def __iter__(self):
        return iter(self.prompts)

    def __len__(self):
        return len(self.prompts)

    def __getitem__(self, i):
        return self.prompts[i]


def _stack_on_stride4(maps: Sequence[torch.Tensor]) -> torch.Tensor:
    """Channel-stack depth maps onto the stride-4 grid of the finest map."""
    target_h = maps[0].shape[2] // 4
    target_w = maps[0].shape[3] // 4
    stacked = []
    for m in maps:
        if m.shape[2] > target_h:
            factor = m.shape[2] // target_h
            m = F.avg_pool2d(m, kernel_size=factor)
        elif m.shape[2] < target_h:
            factor = target_h // m.shape[2]
            m = F.interpolate(m, scale_factor=factor, mode="nearest")
        stacked.append(m)
    return torch.cat(stacked, dim=1)


class DeepBlock(nn.Module):
    """One prompt level: form the input, then add a residual transform."""

    def __init__(self, in_channels: int, out_channels: int, shallow_channels: int, downsample: bool):
        super().__init__()
        stride = 2 if downsample else 1
        self.proj = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        if shallow_channels != out_channels:
            self.skip_proj = nn.Conv2d(shallow_channels, out_channels, 1)
        else:
            self.skip_proj = None
        self.transform1 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.transform_bn1 = nn.BatchNorm2d(out_channels)
        self.transform2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.transform_bn2 = nn.BatchNorm2d(out_channels)
        # Small-gain init for normalized convs: bigger effective step at a
        # fixed learning rate.
        for conv in (self.transform1, self.transform2):
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            with torch.no_grad():
                conv.weight.mul_(0.02)
            nn.init.zeros_(conv.bias)

    def form_input(self, prev: torch.Tensor, shallow: torch.Tensor) -> torch.Tensor:
        x = self.proj(prev)
        skip = shallow
        if skip.shape[2] != x.shape[2]:
            skip = F.avg_pool2d(skip, kernel_size=skip.shape[2] // x.shape[2])
        if self.skip_proj is not None:
            skip = self.skip_proj(skip)
        return x + skip

    def forward(self, prev: torch.Tensor, shallow: torch.Tensor) -> torch.Tensor:
        x = self.form_input(prev, shallow)
        t = self.transform_bn1(self.transform1(F.relu(x)))
        t = self.transform_bn2(self.transform2(F.relu(t)))
        return x + t


class Prompter(nn.Module):
    """Shallow downsampling block plus four deep encoding blocks."""

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        if len(channels) != 4:
            raise ContractError("prompter expects 4 output widths")
        self.channels = tuple(int(c) for c in channels)
        c0 = self.channels[0]
        self.shallow = nn.Sequential(
            nn.Conv2d(3, c0, 3, padding=1),
            nn.ReLU(inplace=False),
            nn.Conv2d(c0, c0, 3, padding=1),
        )
        blocks = []
        prev = c0
        for i, c in enumerate(self.channels):
            blocks.append(DeepBlock(prev, c, c0, downsample=i > 0))
            prev = c
        self.deep = nn.ModuleList(blocks)

    def check_depth(self, maps: Sequence[torch.Tensor]) -> None:
        if len(maps) != 3:
            raise ContractError("expected 3 depth maps, got %d" % len(maps))
        for i, m in enumerate(maps):
            if m.ndim != 4 or m.shape[1] != 1:
                raise ContractError("depth map %d must be (B, 1, H, W)" % i)
            if not torch.isfinite(m).all():
                raise ContractError("depth map %d contains NaN or Inf" % i)
            if m.min() < 0.0 or m.max() > 1.0:
                raise ContractError("depth map %d outside [0, 1]" % i)
            if i > 0:
                prev = maps[i - 1]
                if prev.shape[2] != 2 * m.shape[2] or prev.shape[3] != 2 * m.shape[3]:
                    raise ContractError("depth maps must halve spatially")
        if maps[0].shape[2] % 4 != 0 or maps[0].shape[3] % 4 != 0:
            raise ContractError("finest depth map must be divisible by 4")

    def forward(self, maps: Sequence[torch.Tensor]) -> PromptPyramid:
        self.check_depth(maps)
        shallow = self.shallow(_stack_on_stride4(maps))
        prompts = []
        x = shallow
        for block in self.deep:
            x = block(x, shallow)
            prompts.append(x)
        return PromptPyramid(prompts=prompts)


def encode_prompts(maps, prompter: Prompter) -> PromptPyramid:
    if isinstance(maps, PromptPyramid):
        raise ContractError("encode_prompts takes depth maps, not prompts")
    return prompter(list(maps))
