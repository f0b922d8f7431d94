"""Lightweight per-scale adapter: 1x1 conv + BN + ReLU, shape preserving.

The only trainable stage between the frozen encoder and the decoders.
Disabling it (ablation) routes the encoder pyramid through unchanged.
"""

from typing import Sequence

import torch
from torch import nn

from .backbone import BackboneConfig, FeaturePyramid
from .errors import ContractError


class AdapterBlock(nn.Module):
    """One pyramid level: 1x1 conv, batch norm, ReLU; channels unchanged."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=1)
        self.bn = nn.BatchNorm2d(channels, eps=1e-5, momentum=0.1)
        self.relu = nn.ReLU(inplace=False)
        # The norm behind the conv rescales its output, so a small-gain
        # init trades away nothing while enlarging the effective step the
        # fixed learning rate can take in weight direction.
        nn.init.kaiming_normal_(self.conv.weight, nonlinearity="relu")
        with torch.no_grad():
            self.conv.weight.mul_(0.02)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        return self.relu(self.bn(self.conv(x)))


class Adapter(nn.Module):
    """Four adapter blocks, one per pyramid level."""

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        if len(channels) != 4:
            raise ContractError("adapter expects 4 pyramid levels")
        self.channels = tuple(int(c) for c in channels)
        self.blocks = nn.ModuleList(AdapterBlock(c) for c in self.channels)

    def forward(self, features) -> FeaturePyramid:
        levels = list(features)
        if len(levels) != 4:
            raise ContractError("expected 4 pyramid levels, got %d" % len(levels))
        out = []
        for i, (x, c) in enumerate(zip(levels, self.channels)):
            if x.shape[1] != c:
                raise ContractError(
                    "level %d has %d channels, adapter built for %d"
                    % (i, x.shape[1], c)
                )
            out.append(self.blocks[i](x))
        return FeaturePyramid(levels=out, source="adapter")


def adapt(features: FeaturePyramid, adapter: Adapter) -> FeaturePyramid:
    return adapter(features)


def adapter_param_count(cfg: BackboneConfig) -> int:
    """Conv weight+bias plus BN scale+shift per level: sum of C*C + 3C."""
    return sum(c * c + 3 * c for c in cfg.reassembly_channels)
