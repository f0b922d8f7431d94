"""Fuses depth prompts with image features and decodes class logits.

Coarse-to-fine: an input layer fuses the coarsest (f, psi) pair, three
intermediate layers each upsample 2x, fuse the next finer pair and
transform, and an output layer upsamples 4x to full resolution and
projects to class scores.

The (f, psi) fusion is a 1x1 projection over the channel concatenation,
stored as two column blocks (an f block carrying the bias and a bias-free
psi block) so a prompt-free decoder is exactly the f block alone. That
keeps the ablation equivalence bitwise: zero psi through zero psi-columns
contributes an exact zero tensor.
"""

from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError, InputError


class FusionProject(nn.Module):
    """1x1 projection of concat([f, psi]) back to f's width."""

    def __init__(self, f_channels: int, psi_channels: int):
        super().__init__()
        self.conv_f = nn.Conv2d(f_channels, f_channels, 1)
        if psi_channels > 0:
            self.conv_psi = nn.Conv2d(psi_channels, f_channels, 1, bias=False)
        else:
            self.conv_psi = None
        # Small-gain init: a norm follows the fusion sum in the decoder.
        nn.init.kaiming_normal_(self.conv_f.weight, nonlinearity="relu")
        nn.init.zeros_(self.conv_f.bias)
        with torch.no_grad():
            self.conv_f.weight.mul_(0.02)
            if self.conv_psi is not None:
                self.conv_psi.weight.mul_(0.02)

    def forward(self, f: torch.Tensor, psi: Optional[torch.Tensor]) -> torch.Tensor:
        out = self.conv_f(f)
        if self.conv_psi is not None and psi is not None:
            out = out + self.conv_psi(psi)
        return out


class TransformBlock(nn.Module):
    """Shape-preserving residual conv pair used after each fusion.

    Batch-normalized so the decoder stays trainable from scratch at the
    small learning rates the recipe uses.
    """

    def __init__(self, channels: int):
        super().__init__()
        wide = 2 * channels
        self.conv1 = nn.Conv2d(channels, wide, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(wide)
        self.conv2 = nn.Conv2d(wide, channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(channels)
        # Normalization rescales whatever the convs emit, so a small-gain
        # init buys a larger effective step out of a fixed learning rate.
        for conv in (self.conv1, self.conv2):
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            with torch.no_grad():
                conv.weight.mul_(0.02)
            nn.init.zeros_(conv.bias)

    def forward(self, x):
        t = self.bn1(self.conv1(F.relu(x)))
        t = self.bn2(self.conv2(F.relu(t)))
        return x + t


class SegDecoder(nn.Module):
    """Input layer + three intermediate layers + output layer over 4 levels."""

    def __init__(
        self,
        in_channels: Sequence[int],
        num_classes: int = 7,
        with_prompts: bool = True,
    ):
        super().__init__()
        if len(in_channels) != 4:
            raise ContractError("seg decoder expects 4 pyramid levels")
        self.in_channels = tuple(int(c) for c in in_channels)
        self.num_classes = num_classes
        self.with_prompts = with_prompts
        c = self.in_channels
        psi = c if with_prompts else (0, 0, 0, 0)
        self.fusions = nn.ModuleList(
            FusionProject(c[i], psi[i]) for i in range(4)
        )
        # Normalizing the fused state keeps the trunk well-scaled however
        # the frozen encoder features are distributed.
        self.norms = nn.ModuleList(nn.BatchNorm2d(c[i]) for i in range(4))
        self.transforms = nn.ModuleList(TransformBlock(c[i]) for i in range(4))
        # Carries the upsampled running state down to the next finer width.
        self.carries = nn.ModuleList(
            nn.Conv2d(c[i + 1], c[i], 1) for i in range(3)
        )
        for carry in self.carries:
            nn.init.kaiming_normal_(carry.weight, nonlinearity="relu")
            nn.init.zeros_(carry.bias)
            with torch.no_grad():
                carry.weight.mul_(0.02)
        self.classifier = nn.Conv2d(c[0], num_classes, 1)

    def _check(self, features, prompts) -> None:
        feats = list(features)
        if len(feats) != 4:
            raise ContractError("expected 4 feature levels, got %d" % len(feats))
        for i, (f, c) in enumerate(zip(feats, self.in_channels)):
            if f.shape[1] != c:
                raise ContractError(
                    "feature level %d has %d channels, expected %d"
                    % (i, f.shape[1], c)
                )
        if prompts is not None:
            ps = list(prompts)
            if len(ps) != 4:
                raise ContractError("expected 4 prompt levels, got %d" % len(ps))
            for i, (f, p) in enumerate(zip(feats, ps)):
                if f.shape[2:] != p.shape[2:]:
                    raise ContractError(
                        "prompt level %d spatial %s misaligned with features %s"
                        % (i, tuple(p.shape[2:]), tuple(f.shape[2:]))
                    )

    def forward(self, features, prompts=None) -> torch.Tensor:
        self._check(features, prompts)
        feats = list(features)
        ps = list(prompts) if prompts is not None else [None] * 4
        x = self.transforms[3](self.norms[3](self.fusions[3](feats[3], ps[3])))
        for i in (2, 1, 0):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = self.carries[i](x) + self.fusions[i](feats[i], ps[i])
            x = self.transforms[i](self.norms[i](x))
        x = F.interpolate(x, scale_factor=4, mode="bilinear", align_corners=False)
        return self.classifier(x)


def decode_semantics(features, prompts, decoder: SegDecoder) -> torch.Tensor:
    return decoder(features, prompts)


def predict_mask(logits) -> np.ndarray:
    """Per-pixel argmax with smallest-index tie-breaking."""
    if torch.is_tensor(logits):
        arr = logits.detach().cpu().numpy()
    else:
        arr = np.asarray(logits)
    if not np.all(np.isfinite(arr)):
        raise InputError("logits contain NaN or Inf")
    if arr.ndim == 3:  # (N, H, W)
        return np.argmax(arr, axis=0).astype(np.int64)
    if arr.ndim == 4:  # (B, N, H, W)
        return np.argmax(arr, axis=1).astype(np.int64)
    raise InputError("logits must be 3D or 4D, got %dD" % arr.ndim)
