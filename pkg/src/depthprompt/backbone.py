"""Frozen ViT encoder plus token reassembly into a four-scale pyramid.

The encoder is a plain pre-norm ViT: patch embedding, a class token,
fixed 2D sine-cosine position embeddings (no learned position table, so
any tile size divisible by the patch works), and a stack of transformer
blocks. Four blocks are tapped; their token sequences, class token
stripped and final-norm applied, are reassembled into spatial maps at
strides 4/8/16/32 by a 1x1 projection and a parameter-free resize.

Everything in here is frozen during training; gradients never touch it.
"""

import functools
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import ImageTile
from .errors import ConfigError, ContractError, InputError

PYRAMID_STRIDES = (4, 8, 16, 32)

_PRESETS = {
    "tiny": dict(
        patch_size=8,
        embed_dim=64,
        depth=8,
        num_heads=4,
        tap_indices=(1, 3, 5, 7),
        reassembly_channels=(32, 64, 128, 256),
    ),
    "vit_s": dict(
        patch_size=16,
        embed_dim=384,
        depth=12,
        num_heads=6,
        tap_indices=(2, 5, 8, 11),
        reassembly_channels=(48, 96, 192, 384),
    ),
    "vit_b": dict(
        patch_size=16,
        embed_dim=768,
        depth=12,
        num_heads=12,
        tap_indices=(2, 5, 8, 11),
        reassembly_channels=(64, 128, 256, 512),
    ),
    "vit_l": dict(
        patch_size=16,
        embed_dim=1024,
        depth=24,
        num_heads=16,
        tap_indices=(5, 11, 17, 23),
        reassembly_channels=(96, 192, 384, 768),
    ),
}


@dataclass(frozen=True)
class BackboneConfig:
    """Size knobs of the frozen encoder and its reassembly widths."""

    name: str
    patch_size: int
    embed_dim: int
    depth: int
    num_heads: int
    tap_indices: Tuple[int, int, int, int]
    reassembly_channels: Tuple[int, int, int, int]
    pretrained_weights: Optional[str] = None

    def __post_init__(self):
        if len(self.tap_indices) != 4:
            raise ConfigError("tap_indices must have exactly 4 entries")
        if list(self.tap_indices) != sorted(set(self.tap_indices)):
            raise ConfigError("tap_indices must be strictly increasing")
        if self.tap_indices[-1] >= self.depth:
            raise ConfigError("tap_indices must all be < depth")
        if len(self.reassembly_channels) != 4:
            raise ConfigError("reassembly_channels must have exactly 4 entries")
        if any(c <= 0 for c in self.reassembly_channels):
            raise ConfigError("reassembly_channels must all be > 0")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError("embed_dim must divide evenly into heads")
        if self.embed_dim % 4 != 0:
            raise ConfigError("embed_dim must be divisible by 4 for 2D sincos")
        if self.patch_size <= 0:
            raise ConfigError("patch_size must be positive")


def backbone_config(name: str, pretrained_weights: Optional[str] = None) -> BackboneConfig:
    if name not in _PRESETS:
        raise ConfigError(
            "unknown backbone %r, choose from %s" % (name, sorted(_PRESETS))
        )
    return BackboneConfig(name=name, pretrained_weights=pretrained_weights, **_PRESETS[name])


def encoder_param_count(cfg: BackboneConfig) -> int:
    """Analytic ViT encoder size: patch embed + cls + blocks + final norm."""
    d = cfg.embed_dim
    p = cfg.patch_size
    patch_embed = 3 * p * p * d + d
    cls_token = d
    per_block = 12 * d * d + 13 * d
    final_norm = 2 * d
    return patch_embed + cls_token + cfg.depth * per_block + final_norm


def expected_level_shapes(cfg: BackboneConfig, height: int, width: int):
    """Contracted (H, W, C) of every pyramid level for a given tile size."""
    return [
        (height // s, width // s, c)
        for s, c in zip(PYRAMID_STRIDES, cfg.reassembly_channels)
    ]


@functools.lru_cache(maxsize=32)
def _sincos_table(grid_h: int, grid_w: int, dim: int) -> torch.Tensor:
    """Fixed 2D sine-cosine position embeddings, shape (grid_h*grid_w, dim)."""
    half = dim // 2

    def axis_embed(positions: torch.Tensor) -> torch.Tensor:
        omega = torch.arange(half // 2, dtype=torch.float64) / (half // 2)
        omega = 1.0 / (10000.0 ** omega)
        angles = positions[:, None] * omega[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)

    rows = torch.arange(grid_h, dtype=torch.float64)
    cols = torch.arange(grid_w, dtype=torch.float64)
    row_embed = axis_embed(rows)  # (grid_h, half)
    col_embed = axis_embed(cols)  # (grid_w, half)
    table = torch.zeros(grid_h * grid_w, dim, dtype=torch.float64)
    idx = 0
    for r in range(grid_h):
        for c in range(grid_w):
            table[idx, :half] = row_embed[r]
            table[idx, half:] = col_embed[c]
            idx += 1
    return table.to(torch.float32)


class TransformerBlock(nn.Module):
    """Pre-norm multi-head self-attention + MLP block."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Linear(4 * dim, dim),
        )

    def forward(self, x):
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h, need_weights=False)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x


class ViTEncoder(nn.Module):
    """Patch-tokenizing transformer returning tapped token sequences."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(3, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        nn.init.normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.num_heads) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Returns the final-norm'd token sequence after each tapped block,
        class token stripped, as (B, N, C) tensors."""
        b, _, h, w = x.shape
        p = self.cfg.patch_size
        if h % p != 0 or w % p != 0:
            raise InputError("tile size %dx%d not divisible by patch %d" % (h, w, p))
        tokens = self.patch_embed(x)  # (B, C, h/p, w/p)
        gh, gw = tokens.shape[2], tokens.shape[3]
        tokens = tokens.flatten(2).transpose(1, 2)  # (B, N, C)
        tokens = tokens + _sincos_table(gh, gw, self.cfg.embed_dim)[None]
        cls = self.cls_token.expand(b, -1, -1)
        tokens = torch.cat([cls, tokens], dim=1)

        taps = []
        tap_set = set(self.cfg.tap_indices)
        for i, block in enumerate(self.blocks):
            tokens = block(tokens)
            if i in tap_set:
                taps.append(self.norm(tokens)[:, 1:, :])
        return taps


class Reassembly(nn.Module):
    """Projects tapped tokens to per-level widths and resizes to stride."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.projections = nn.ModuleList(
            nn.Conv2d(cfg.embed_dim, c, kernel_size=1)
            for c in cfg.reassembly_channels
        )

    def reassemble(self, tokens: torch.Tensor, level: int, grid_hw: Tuple[int, int]) -> torch.Tensor:
        """Map one (B, N, C) token sequence to the level's spatial grid."""
        gh, gw = grid_hw
        if tokens.ndim != 3 or tokens.shape[1] != gh * gw:
            raise InputError(
                "token count %d does not match grid %dx%d"
                % (tokens.shape[1] if tokens.ndim == 3 else -1, gh, gw)
            )
        grid = tokens.transpose(1, 2).reshape(tokens.shape[0], tokens.shape[2], gh, gw)
        grid = self.projections[level](grid)
        token_stride = self.cfg.patch_size
        target_stride = PYRAMID_STRIDES[level]
        if target_stride < token_stride:
            factor = token_stride // target_stride
            grid = F.interpolate(grid, scale_factor=factor, mode="bilinear", align_corners=False)
        elif target_stride > token_stride:
            factor = target_stride // token_stride
            grid = F.avg_pool2d(grid, kernel_size=factor)
        return grid

    def forward(self, taps: Sequence[torch.Tensor], grid_hw: Tuple[int, int]) -> List[torch.Tensor]:
        return [self.reassemble(t, i, grid_hw) for i, t in enumerate(taps)]


@dataclass
class FeaturePyramid:
    """Four spatial feature maps at strides 4/8/16/32."""

    levels: List[torch.Tensor]
    source: str  # "encoder" or "adapter"

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ContractError("feature pyramid must have exactly 4 levels")
        for i in range(1, 4):
            prev, cur = self.levels[i - 1], self.levels[i]
            if prev.shape[2] != 2 * cur.shape[2] or prev.shape[3] != 2 * cur.shape[3]:
                raise ContractError("pyramid levels must halve spatially")

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


class Backbone(nn.Module):
    """Encoder + reassembly with every parameter frozen."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ViTEncoder(cfg)
        self.reassembly = Reassembly(cfg)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # Stays in eval mode no matter what the surrounding model does.
        return super().train(False)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        b, c, h, w = x.shape
        if c != 3:
            raise InputError("expected 3-channel input, got %d" % c)
        if h % 32 != 0 or w % 32 != 0:
            raise InputError("tile dims must be divisible by 32, got %dx%d" % (h, w))
        if h < self.cfg.patch_size or w < self.cfg.patch_size:
            raise InputError("tile smaller than one patch")
        gh, gw = h // self.cfg.patch_size, w // self.cfg.patch_size
        with torch.no_grad():
            taps = self.encoder(x)
            levels = self.reassembly(taps, (gh, gw))
        return FeaturePyramid(levels=levels, source="encoder")


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> Backbone:
    """Construct a backbone with seeded random init, then load weights if set."""
    torch.manual_seed(seed)
    backbone = Backbone(cfg)
    if cfg.pretrained_weights:
        load_weight_file(backbone, cfg.pretrained_weights)
    return backbone


def tile_to_tensor(tile: ImageTile) -> torch.Tensor:
    return torch.from_numpy(
        np.ascontiguousarray(tile.pixels.transpose(2, 0, 1), dtype=np.float32)
    )[None]


def extract_features(
    tile: ImageTile, cfg: BackboneConfig, backbone: Optional[Backbone] = None, seed: int = 0
) -> FeaturePyramid:
    """Forward one tile through a (possibly freshly built) frozen backbone."""
    if backbone is None:
        backbone = build_backbone(cfg, seed=seed)
    return backbone(tile_to_tensor(tile))


def save_weight_file(module: nn.Module, path: str) -> None:
    """Weight file format: an npz archive, one array per state-dict entry."""
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    np.savez(path, **arrays)


def load_weight_file(module: nn.Module, path: str) -> None:
    try:
        archive = np.load(path)
    except (OSError, ValueError) as exc:
        raise ConfigError("cannot read weight file %s: %s" % (path, exc))
    state = module.state_dict()
    missing = [k for k in state if k not in archive.files]
    extra = [k for k in archive.files if k not in state]
    if missing or extra:
        raise ConfigError(
            "weight file keys do not match module (missing %s, extra %s)"
            % (missing[:3], extra[:3])
        )
    new_state = {}
    for key in state:
        arr = archive[key]
        if tuple(arr.shape) != tuple(state[key].shape):
            raise ConfigError(
                "weight %s has shape %s, expected %s"
                % (key, tuple(arr.shape), tuple(state[key].shape))
            )
        new_state[key] = torch.from_numpy(arr)
    module.load_state_dict(new_state)


def parameter_report(model: nn.Module) -> Dict[str, Dict[str, object]]:
    """Per-child parameter counts and trainability flags."""
    report = {}
    for name, child in model.named_children():
        params = list(child.parameters())
        report[name] = {
            "parameters": sum(p.numel() for p in params),
            "trainable": any(p.requires_grad for p in params) if params else False,
        }
    return report


def parameter_checksum(module: nn.Module) -> str:
    """Order-independent digest of all parameter values, for frozen checks."""
    import hashlib

    digest = hashlib.sha256()
    for key in sorted(module.state_dict()):
        value = module.state_dict()[key]
        digest.update(key.encode())
        digest.update(value.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
