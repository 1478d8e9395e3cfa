"""The full DRRNet: backbone, context and detail encoders, fusion neck, decoder."""

import torch
import torch.nn as nn

from .backbone import build_backbone
from .config import ModelConfig
from .context_encoder import OmniContextEncoder
from .decoder import PredictionSet, RefinementDecoder
from .detail_encoder import MicroDetailEncoder
from .fusion import MacroMicroFusion


class DRRNet(nn.Module):
    def __init__(self, config: ModelConfig, load_pretrained: bool = True):
        super().__init__()
        self.config = config
        width = config.width
        self.backbone = build_backbone(config.backbone, load_pretrained=load_pretrained)
        channels = self.backbone.stage_channels
        self.context = OmniContextEncoder(channels, width, config.ocm_fusion, config.se_reduction)
        self.detail = MicroDetailEncoder(channels, width, config.mdm_fusion, config.se_reduction)
        self.fusion = nn.ModuleList(
            MacroMicroFusion(width, config.mmf_fusion, config.se_reduction) for _ in range(4)
        )
        self.decoder = RefinementDecoder(channels[-1], width, config.se_reduction)

    def forward(self, images: torch.Tensor) -> PredictionSet:
        pyramid = self.backbone(images)
        context = self.context(pyramid)
        detail = self.detail(pyramid)
        fused = [mmf(g, l) for mmf, g, l in zip(self.fusion, context, detail)]
        return self.decoder(pyramid[-1], fused)


def build_model(config: ModelConfig, load_pretrained: bool = True) -> DRRNet:
    return DRRNet(config, load_pretrained=load_pretrained)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
