"""MicroDetail encoder: ASPP and depthwise-separable paths joined by SE with a residual."""

from typing import Optional, Sequence

import torch
import torch.nn as nn

from .errors import IncompletePyramid, ResolutionMismatch
from .layers import ConvBNReLU, DepthwiseSeparableConv, SEBlock, Upsample2x

DILATION_RATES = (1, 3, 5, 7)
DW_KERNELS = (3, 5, 7)


class MicroDetailBlock(nn.Module):
    def __init__(self, in_channels: int, width: int, fusion: str = "cat", reduction: int = 4):
        super().__init__()
        self.fusion = fusion
        self.adjust = ConvBNReLU(in_channels, width, 1)
        self.local = ConvBNReLU(width, width, 3)
        self.dilated = nn.ModuleList(ConvBNReLU(width, width, 3, dilation=r) for r in DILATION_RATES)
        self.aspp_reduce = ConvBNReLU(len(DILATION_RATES) * width, width, 1)
        self.separable = nn.ModuleList(
            DepthwiseSeparableConv(width, width, k, norm_act=True) for k in DW_KERNELS
        )
        self.dw_reduce = ConvBNReLU(len(DW_KERNELS) * width, width, 1)
        local_channels = 2 * width if fusion == "cat" else width
        self.se = SEBlock(local_channels, reduction)
        self.residual = ConvBNReLU(width, width, 3)
        self.fuse = ConvBNReLU(local_channels + width, width, 3)

    def aspp_branch(self, x1: torch.Tensor) -> torch.Tensor:
        """F_aspp: four dilated 3x3 convs, concatenated and reduced to the working width."""
        return self.aspp_reduce(torch.cat([conv(x1) for conv in self.dilated], dim=1))

    def dw_branch(self, x1: torch.Tensor) -> torch.Tensor:
        """F_dw: 3x3, 5x5 and 7x7 depthwise-separable convs, concatenated and reduced."""
        return self.dw_reduce(torch.cat([conv(x1) for conv in self.separable], dim=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x0 = self.adjust(x)
        x1 = self.local(x0)
        f_aspp = self.aspp_branch(x1)
        f_dw = self.dw_branch(x1)
        joint = torch.cat([f_aspp, f_dw], dim=1) if self.fusion == "cat" else f_aspp + f_dw
        local = self.se(joint)
        return self.fuse(torch.cat([local, self.residual(x0)], dim=1)) + x0


class MicroDetailEncoder(nn.Module):
    """Top-down stack of MDM blocks, mirroring the context encoder's wiring."""

    def __init__(self, stage_channels: Sequence[int], width: int, fusion: str = "cat", reduction: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(
            MicroDetailBlock(c + (width if level < 4 else 0), width, fusion, reduction)
            for level, c in enumerate(stage_channels, start=1)
        )
        self.upsamplers = nn.ModuleList(Upsample2x(width) for _ in range(3))

    def mdm_forward(self, level: int, x: torch.Tensor, l_above: Optional[torch.Tensor] = None) -> torch.Tensor:
        if not 1 <= level <= 4:
            raise ValueError(f"level must be in 1..4, got {level}")
        if level == 4:
            if l_above is not None:
                raise ResolutionMismatch("level 4 has no deeper detail input")
            return self.blocks[3](x)
        if l_above is None:
            raise ResolutionMismatch(f"level {level} needs the level {level + 1} output")
        expected = (x.shape[-2] // 2, x.shape[-1] // 2)
        if tuple(l_above.shape[-2:]) != expected or x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ResolutionMismatch(
                f"deeper input {tuple(l_above.shape[-2:])} is not one level below {tuple(x.shape[-2:])}"
            )
        return self.blocks[level - 1](torch.cat([x, self.upsamplers[level - 1](l_above)], dim=1))

    def forward(self, pyramid: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(pyramid) != 4:
            raise IncompletePyramid(f"expected 4 pyramid levels, got {len(pyramid)}")
        outputs: list[Optional[torch.Tensor]] = [None] * 4
        above = None
        for level in range(4, 0, -1):
            above = self.mdm_forward(level, pyramid[level - 1], above)
            outputs[level - 1] = above
        return outputs
