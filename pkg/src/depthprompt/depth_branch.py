"""Depth decoding branch and the pseudo-label plumbing that supervises it.

The decoder follows the dense-prediction-transformer recipe: project each
pyramid level to a common width, fuse coarse-to-fine with residual conv
units, and emit sigmoid-bounded depth heads at the last three fusion
stages. Heads upsample 4x, so stages at strides 16/8/4 yield depth maps at
strides 4/2/1 of the input tile.

Pseudo-labels come from a pluggable provider: either precomputed teacher
files (16-bit PNG, ``<tile_id>_depth.png``) or the synthetic generator's
height field used as an oracle.
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import depth_path, load_depth_png
from .errors import ContractError, InputError, MissingLabelError

DEPTH_STRIDES = (1, 2, 4)


def normalize_depth(raw) -> np.ndarray:
    """Min-max normalize a depth map to [0, 1]; constant maps become zeros."""
    arr = np.asarray(raw, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise InputError("depth map contains NaN or Inf")
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def resize_area(depth: np.ndarray, factor: int) -> np.ndarray:
    """Downsample by integer factor with non-overlapping box averaging."""
    if factor < 1:
        raise InputError("resize factor must be >= 1")
    arr = np.asarray(depth, dtype=np.float32)
    if factor == 1:
        return arr.copy()
    h, w = arr.shape
    if h % factor != 0 or w % factor != 0:
        raise InputError(
            "map shape %s not divisible by factor %d" % ((h, w), factor)
        )
    return arr.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


@dataclass
class PseudoLabel:
    """Teacher depth for one tile, already normalized to [0, 1]."""

    tile_id: str
    depth: np.ndarray
    provenance: str  # "teacher_file" or "synthetic_oracle"


class PseudoLabelProvider:
    """Read-only tile_id -> PseudoLabel lookup."""

    def lookup(self, tile_id: str) -> PseudoLabel:
        raise NotImplementedError

    def has(self, tile_id: str) -> bool:
        raise NotImplementedError


class OraclePseudoLabelProvider(PseudoLabelProvider):
    """Serves the synthetic generator's height fields as depth labels."""

    def __init__(self, heights: Dict[str, np.ndarray]):
        self._store = {
            tile_id: normalize_depth(h) for tile_id, h in heights.items()
        }

    def lookup(self, tile_id: str) -> PseudoLabel:
        if tile_id not in self._store:
            raise MissingLabelError("no oracle depth for tile %r" % tile_id)
        return PseudoLabel(
            tile_id=tile_id,
            depth=self._store[tile_id],
            provenance="synthetic_oracle",
        )

    def has(self, tile_id: str) -> bool:
        return tile_id in self._store


class FilePseudoLabelProvider(PseudoLabelProvider):
    """Serves precomputed teacher depth files from ``<root>/depth/``."""

    def __init__(self, root: str):
        self.root = root

    def lookup(self, tile_id: str) -> PseudoLabel:
        path = depth_path(self.root, tile_id)
        if not self.has(tile_id):
            raise MissingLabelError("no depth file for tile %r (%s)" % (tile_id, path))
        return PseudoLabel(
            tile_id=tile_id,
            depth=normalize_depth(load_depth_png(path)),
            provenance="teacher_file",
        )

    def has(self, tile_id: str) -> bool:
        import os

        return os.path.isfile(depth_path(self.root, tile_id))


@dataclass
class DepthTargets:
    """A pseudo-label resized to every decoder output stride."""

    tile_id: str
    maps: Tuple[np.ndarray, ...]  # strides 1, 2, 4 in this order
    provenance: str


def fetch_pseudo_label(provider: PseudoLabelProvider, tile_id: str) -> DepthTargets:
    """Fetch, normalize and resize a pseudo-label to strides 1, 2 and 4."""
    label = provider.lookup(tile_id)
    maps = tuple(resize_area(label.depth, s) for s in DEPTH_STRIDES)
    return DepthTargets(tile_id=tile_id, maps=maps, provenance=label.provenance)


class ResidualConvUnit(nn.Module):
    """Pre-activation residual 3x3 conv pair, shape preserving.

    Group norm rather than batch norm: the heads regress per-tile depth
    levels and batch statistics would couple tiles with unrelated height
    ranges. Small-gain conv init under a norm enlarges the effective step
    the fixed learning rate can take.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.gn1 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.gn2 = nn.GroupNorm(8, channels)
        for conv in (self.conv1, self.conv2):
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            with torch.no_grad():
                conv.weight.mul_(0.02)
            nn.init.zeros_(conv.bias)

    def forward(self, x):
        out = self.gn1(self.conv1(F.relu(x)))
        out = self.gn2(self.conv2(F.relu(out)))
        return x + out


class DepthHead(nn.Module):
    """4x upsample then two convs into a single sigmoid-bounded channel."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels // 2, 3, padding=1)
        self.gn1 = nn.GroupNorm(8, channels // 2)
        self.conv2 = nn.Conv2d(channels // 2, 1, 3, padding=1)
        nn.init.kaiming_normal_(self.conv1.weight, nonlinearity="relu")
        with torch.no_grad():
            self.conv1.weight.mul_(0.02)
        nn.init.zeros_(self.conv1.bias)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=4, mode="bilinear", align_corners=False)
        x = F.relu(self.gn1(self.conv1(x)))
        return torch.sigmoid(self.conv2(x))


class DepthDecoder(nn.Module):
    """Coarse-to-fine fusion decoder over a 4-level feature pyramid.

    forward() takes features at strides 4/8/16/32 and returns depth maps at
    strides 1, 2 and 4 (finest first), each in [0, 1].
    """

    def __init__(self, in_channels: Sequence[int], fusion_channels: int = 64):
        super().__init__()
        if len(in_channels) != 4:
            raise ContractError("depth decoder expects 4 pyramid levels")
        if fusion_channels <= 0 or fusion_channels % 16 != 0:
            raise ContractError("fusion width must be a positive multiple of 16")
        self.in_channels = tuple(int(c) for c in in_channels)
        self.fusion_channels = fusion_channels
        self.projections = nn.ModuleList(
            nn.Conv2d(c, fusion_channels, 3, padding=1) for c in self.in_channels
        )
        # Per-sample normalization of every projected level keeps the fused
        # trunk well-scaled regardless of the encoder feature distribution.
        self.proj_norms = nn.ModuleList(
            nn.GroupNorm(8, fusion_channels) for _ in range(4)
        )
        for proj in self.projections:
            nn.init.kaiming_normal_(proj.weight, nonlinearity="relu")
            nn.init.zeros_(proj.bias)
            with torch.no_grad():
                proj.weight.mul_(0.02)
        self.refine = nn.ModuleList(
            ResidualConvUnit(fusion_channels) for _ in range(4)
        )
        # Heads for the fusion stages at strides 16, 8 and 4, emitting
        # depth at strides 4, 2 and 1 respectively.
        self.heads = nn.ModuleList(DepthHead(fusion_channels) for _ in range(3))

    def check_features(self, features: Sequence[torch.Tensor]) -> None:
        if len(features) != 4:
            raise ContractError(
                "expected 4 pyramid levels, got %d" % len(features)
            )
        for i, (f, c) in enumerate(zip(features, self.in_channels)):
            if f.ndim != 4:
                raise ContractError("level %d is not a 4D tensor" % i)
            if f.shape[1] != c:
                raise ContractError(
                    "level %d has %d channels, expected %d" % (i, f.shape[1], c)
                )
            if i > 0:
                prev = features[i - 1]
                if (prev.shape[2] != 2 * f.shape[2]) or (prev.shape[3] != 2 * f.shape[3]):
                    raise ContractError(
                        "level %d spatial size %s is not half of level %d"
                        % (i, tuple(f.shape[2:]), i - 1)
                    )

    def forward(self, features: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        self.check_features(features)
        x = self.refine[3](self.proj_norms[3](self.projections[3](features[3])))
        stage_maps = []
        for level in (2, 1, 0):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = x + self.proj_norms[level](self.projections[level](features[level]))
            x = self.refine[level](x)
            stage_maps.append(x)
        # stage_maps holds strides 16, 8, 4; heads lift them to 4, 2, 1.
        coarse = self.heads[0](stage_maps[0])
        mid = self.heads[1](stage_maps[1])
        fine = self.heads[2](stage_maps[2])
        return [fine, mid, coarse]
