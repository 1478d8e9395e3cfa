"""OmniContext encoder: three-resolution branches fused by per-pixel scale attention."""

from typing import Optional, Sequence

import torch
import torch.nn as nn

from .errors import IncompletePyramid, ResolutionMismatch
from .layers import ConvBNReLU, SEBlock, Upsample2x, resize_to, upsample2x


class OmniContextBlock(nn.Module):
    """One OCM block: large/medium/small branches, softmax scale weights, SE, residual."""

    def __init__(self, in_channels: int, width: int, fusion: str = "cat", reduction: int = 4):
        super().__init__()
        self.fusion = fusion
        self.large = ConvBNReLU(in_channels, width, 3, stride=2)
        self.medium = ConvBNReLU(in_channels, width, 1)
        self.small = ConvBNReLU(in_channels, width, 3)
        self.enhance = nn.ModuleList(ConvBNReLU(width, width, 3) for _ in range(3))
        self.scale_conv = ConvBNReLU(3 * width if fusion == "cat" else width, width, 3)
        self.scale_logits = nn.Conv2d(width, 3, 1)
        self.se = SEBlock(width, reduction)
        self.residual = nn.Conv2d(in_channels, width, 1)

    def branches(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Branch features f_l, f_m, f_s at the medium-branch resolution."""
        size = x.shape[-2:]
        f_l = resize_to(self.large(x), size)
        f_m = self.medium(x)
        f_s = resize_to(self.small(upsample2x(x)), size)
        return [enhance(f) for enhance, f in zip(self.enhance, (f_l, f_m, f_s))]

    def scale_weights(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        """Per-pixel weights B x 3 x H x W; nonnegative and summing to one."""
        joint = torch.cat(list(feats), dim=1) if self.fusion == "cat" else feats[0] + feats[1] + feats[2]
        return torch.softmax(self.scale_logits(self.scale_conv(joint)), dim=1)

    @staticmethod
    def fuse(feats: Sequence[torch.Tensor], weights: torch.Tensor) -> torch.Tensor:
        return sum(weights[:, k : k + 1] * f for k, f in enumerate(feats))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.branches(x)
        fused = self.fuse(feats, self.scale_weights(feats))
        return self.se(fused) + self.residual(x)


class OmniContextEncoder(nn.Module):
    """Applies OCM blocks top-down, feeding each level the upsampled deeper output."""

    def __init__(self, stage_channels: Sequence[int], width: int, fusion: str = "cat", reduction: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(
            OmniContextBlock(c + (width if level < 4 else 0), width, fusion, reduction)
            for level, c in enumerate(stage_channels, start=1)
        )
        self.upsamplers = nn.ModuleList(Upsample2x(width) for _ in range(3))

    def ocm_forward(self, level: int, x: torch.Tensor, g_above: Optional[torch.Tensor] = None) -> torch.Tensor:
        """g_i from x_i and, below the top level, g_{i+1}."""
        if not 1 <= level <= 4:
            raise ValueError(f"level must be in 1..4, got {level}")
        if level == 4:
            if g_above is not None:
                raise ResolutionMismatch("level 4 has no deeper context input")
            return self.blocks[3](x)
        if g_above is None:
            raise ResolutionMismatch(f"level {level} needs the level {level + 1} output")
        expected = (x.shape[-2] // 2, x.shape[-1] // 2)
        if tuple(g_above.shape[-2:]) != expected or x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ResolutionMismatch(
                f"deeper input {tuple(g_above.shape[-2:])} is not one level below {tuple(x.shape[-2:])}"
            )
        up = self.upsamplers[level - 1](g_above)
        return self.blocks[level - 1](torch.cat([x, up], dim=1))

    def forward(self, pyramid: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(pyramid) != 4:
            raise IncompletePyramid(f"expected 4 pyramid levels, got {len(pyramid)}")
        outputs: list[Optional[torch.Tensor]] = [None] * 4
        above = None
        for level in range(4, 0, -1):
            above = self.ocm_forward(level, pyramid[level - 1], above)
            outputs[level - 1] = above
        return outputs
