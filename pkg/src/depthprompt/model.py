"""Full segmenter: frozen backbone, adapter, depth branch, prompter, head.

The two ablation toggles mirror the module roles: with the adapter off the
encoder pyramid flows through untouched (identity bypass); with the
prompter off the depth decoder and prompter are absent entirely and the
segmentation decoder runs prompt-free.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
from torch import nn

from .adapter import Adapter
from .backbone import (
    Backbone,
    BackboneConfig,
    FeaturePyramid,
    backbone_config,
    load_weight_file,
)
from .data import CLASS_NAMES
from .depth_branch import DepthDecoder
from .prompter import Prompter, prompt_channels
from .seg_decoder import SegDecoder


@dataclass(frozen=True)
class ModelConfig:
    """Assembly switches around a backbone preset."""

    backbone: str = "tiny"
    num_classes: int = len(CLASS_NAMES)
    adapter_enabled: bool = True
    prompter_enabled: bool = True
    depth_fusion_channels: int = 128
    pretrained_weights: Optional[str] = None

    def backbone_config(self) -> BackboneConfig:
        return backbone_config(self.backbone, self.pretrained_weights)


class DepthPromptSegmenter(nn.Module):
    """End-to-end tile -> (class logits, depth maps) network."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        bcfg = cfg.backbone_config()
        channels = bcfg.reassembly_channels
        self.backbone = Backbone(bcfg)
        if bcfg.pretrained_weights:
            load_weight_file(self.backbone, bcfg.pretrained_weights)
        self.adapter = Adapter(channels) if cfg.adapter_enabled else None
        if cfg.prompter_enabled:
            self.depth_decoder = DepthDecoder(channels, cfg.depth_fusion_channels)
            self.prompter = Prompter(prompt_channels(bcfg))
        else:
            self.depth_decoder = None
            self.prompter = None
        self.seg_decoder = SegDecoder(
            channels, cfg.num_classes, with_prompts=cfg.prompter_enabled
        )

    @property
    def adapter_enabled(self) -> bool:
        return self.adapter is not None

    @property
    def prompter_enabled(self) -> bool:
        return self.prompter is not None

    def features(self, x: torch.Tensor) -> FeaturePyramid:
        pyramid = self.backbone(x)
        if self.adapter is not None:
            pyramid = self.adapter(pyramid)
        return pyramid

    def forward(
        self, x: torch.Tensor
    ) -> Tuple[torch.Tensor, Optional[List[torch.Tensor]]]:
        pyramid = self.features(x)
        depth_maps = None
        prompts = None
        if self.prompter is not None:
            depth_maps = self.depth_decoder(list(pyramid))
            # Stop-gradient at the prompt boundary: the depth maps are an
            # input modality for the prompter, trained only against the
            # teacher. Letting the class loss backdrive them repurposes
            # the maps as free-form features and they stop being depth.
            prompts = self.prompter([m.detach() for m in depth_maps])
        logits = self.seg_decoder(list(pyramid), prompts)
        return logits, depth_maps


def build_model(cfg: ModelConfig, seed: int = 0) -> DepthPromptSegmenter:
    """Seeded construction so identical seeds give identical parameters."""
    torch.manual_seed(seed)
    return DepthPromptSegmenter(cfg)


def trainable_parameters(model: nn.Module):
    return [p for p in model.parameters() if p.requires_grad]
