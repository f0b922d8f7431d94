"""Depth-distillation (SSIM) loss, classification cross-entropy, and their sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError, ShapeMismatchError, UndefinedMetricError

IGNORE_INDEX = 255


@dataclass(frozen=True)
class SsimParams:
    """Windowed-statistics parameters: Gaussian window plus stability constants."""

    window: int = 11
    sigma: float = 1.5
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise InputError(f"window must be odd and >= 3, got {self.window}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise InputError("SSIM stability constants must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _gaussian_kernel(window: int, sigma: float) -> torch.Tensor:
    half = (window - 1) / 2
    g = torch.tensor([math.exp(-((i - half) ** 2) / (2 * sigma**2)) for i in range(window)], dtype=torch.float64)
    kernel = torch.outer(g, g)
    return kernel / kernel.sum()


def _as_maps(value, name: str) -> torch.Tensor:
    """Coerce an array or tensor to (B, 1, H, W)."""
    if not torch.is_tensor(value):
        value = torch.as_tensor(np.asarray(value))
    if value.ndim == 2:
        value = value[None, None]
    elif value.ndim == 3:
        value = value[:, None]
    elif value.ndim != 4:
        raise InputError(f"{name} must be 2D, 3D, or 4D, got {value.ndim}D")
    return value


def ssim(x, y, params: SsimParams | None = None) -> torch.Tensor:
    """Mean structural similarity between two maps (or batches of maps).

    Statistics are Gaussian-weighted over valid window placements; when the
    window does not fit the map, a single uniform global window is used.
    Differentiable when given tensors.
    """
    params = params or SsimParams()
    x = _as_maps(x, "X")
    y = _as_maps(y, "Y")
    if x.shape != y.shape:
        raise ShapeMismatchError(f"SSIM inputs differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    for name, t in (("X", x), ("Y", y)):
        with torch.no_grad():
            if not torch.isfinite(t).all():
                raise InputError(f"{name} contains NaN or Inf")
            if t.min() < 0 or t.max() > params.dynamic_range:
                raise InputError(f"{name} values outside [0, {params.dynamic_range}]")

    h, w = x.shape[-2:]
    if params.window > min(h, w):
        mx = x.mean(dim=(-2, -1))
        my = y.mean(dim=(-2, -1))
        vx = (x * x).mean(dim=(-2, -1)) - mx * mx
        vy = (y * y).mean(dim=(-2, -1)) - my * my
        cov = (x * y).mean(dim=(-2, -1)) - mx * my
    else:
        kernel = _gaussian_kernel(params.window, params.sigma).to(x.dtype)[None, None]
        mx = F.conv2d(x, kernel)
        my = F.conv2d(y, kernel)
        vx = F.conv2d(x * x, kernel) - mx * mx
        vy = F.conv2d(y * y, kernel) - my * my
        cov = F.conv2d(x * y, kernel) - mx * my
    c1, c2 = params.c1, params.c2
    score = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return score.mean()


def depth_loss(pred_maps, target_maps, params: SsimParams | None = None) -> torch.Tensor:
    """Mean over scales of 1 - SSIM(prediction, pseudo-label); range [0, 2]."""
    if len(pred_maps) != len(target_maps):
        raise InputError(f"got {len(pred_maps)} predictions for {len(target_maps)} targets")
    losses = [1.0 - ssim(p, t, params) for p, t in zip(pred_maps, target_maps)]
    return torch.stack([torch.as_tensor(v) for v in losses]).mean()


def class_loss(logits, labels, ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Multiclass cross-entropy averaged over non-ignored pixels.

    Equals the two-term binary form when there are exactly two classes.
    """
    if not torch.is_tensor(logits):
        logits = torch.as_tensor(np.asarray(logits))
    if not torch.is_tensor(labels):
        labels = torch.as_tensor(np.asarray(labels))
    if logits.ndim == 3:
        logits = logits[None]
    if labels.ndim == 2:
        labels = labels[None]
    if logits.ndim != 4 or labels.ndim != 3:
        raise InputError("expected logits (B, N, H, W) and labels (B, H, W)")
    if logits.shape[-2:] != labels.shape[-2:] or logits.shape[0] != labels.shape[0]:
        raise ShapeMismatchError(
            f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}"
        )
    with torch.no_grad():
        if not torch.isfinite(logits).all():
            raise InputError("logits contain NaN or Inf")
    labels = labels.long()
    valid = labels != ignore_index
    if not bool(valid.any()):
        raise UndefinedMetricError("all pixels carry the ignore label")
    n = logits.shape[1]
    bad = valid & ((labels < 0) | (labels >= n))
    if bool(bad.any()):
        raise InputError(f"label value outside 0..{n - 1}")
    return F.cross_entropy(logits, labels, ignore_index=ignore_index)


@dataclass(frozen=True)
class LossReport:
    """Per-step loss summary; total is exactly the sum of the parts."""

    depth_loss: float | None
    class_loss: float
    total: float


def total_loss(depth: float | None, cls: float) -> LossReport:
    """Unweighted sum of the depth and classification terms.

    ``depth`` may be None when the depth pathway is detached; the total is
    then the classification term alone.
    """
    cls = float(cls)
    if depth is None:
        return LossReport(depth_loss=None, class_loss=cls, total=cls)
    depth = float(depth)
    return LossReport(depth_loss=depth, class_loss=cls, total=depth + cls)
