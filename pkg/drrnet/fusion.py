"""Macro-micro fusion of context and detail features in the spatial and frequency domains."""

import torch
import torch.nn as nn

from .errors import ChannelIndivisible, ResolutionMismatch, ShapeMismatch
from .layers import FFT_NORM, ConvBNReLU

NUM_GROUPS = 4


class GroupFusionBlock(nn.Module):
    """Spatial 3x3 CBR plus an amplitude-modulated Fourier path.

    The frequency path scales every channel of the real 2-D spectrum by one
    sigmoid weight computed from the channel's mean amplitude, so the inverse
    transform stays exactly real.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.spatial = ConvBNReLU(channels, channels, 3)
        self.modulation = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels),
            nn.Sigmoid(),
        )
        self.gamma = nn.Parameter(torch.ones(1))

    def modulation_weights(self, spectrum: torch.Tensor) -> torch.Tensor:
        amplitude = spectrum.abs().mean(dim=(-2, -1))
        return self.modulation(amplitude)[..., None, None]

    def frequency(self, x: torch.Tensor) -> torch.Tensor:
        spectrum = torch.fft.rfft2(x, norm=FFT_NORM)
        weights = self.modulation_weights(spectrum)
        return torch.fft.irfft2(spectrum * weights, s=x.shape[-2:], norm=FFT_NORM)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.spatial(x) + self.gamma * self.frequency(x)


class MacroMicroFusion(nn.Module):
    """Fuses g_i and l_i into F_i at the working width."""

    def __init__(self, width: int, fusion: str = "cat", reduction: int = 4):
        super().__init__()
        self.width = width
        self.fusion = fusion
        joint = 2 * width if fusion == "cat" else width
        if joint % NUM_GROUPS:
            raise ChannelIndivisible(f"{joint} fused channels do not split into {NUM_GROUPS} groups")
        self.group_channels = joint // NUM_GROUPS
        self.groups = nn.ModuleList(GroupFusionBlock(self.group_channels, reduction) for _ in range(NUM_GROUPS))
        self.gate = nn.Conv2d(joint, width, 3, padding=1)
        self.reduce = nn.Conv2d(joint, width, 1)
        self.gamma = nn.Parameter(torch.ones(1))

    def fused_groups(self, g: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
        """F_fused: group-wise spatial+frequency fusion of the joint feature."""
        joint = torch.cat([g, l], dim=1) if self.fusion == "cat" else g + l
        chunks = torch.split(joint, self.group_channels, dim=1)
        return torch.cat([block(chunk) for block, chunk in zip(self.groups, chunks)], dim=1)

    def mmf_forward(self, g: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
        if g.shape != l.shape:
            raise ResolutionMismatch(f"context {tuple(g.shape)} and detail {tuple(l.shape)} differ")
        if g.shape[1] != self.width:
            raise ShapeMismatch(f"expected {self.width} channels, got {g.shape[1]}")
        fused = self.fused_groups(g, l)
        reduced = self.reduce(fused)
        return reduced + self.gamma * torch.sigmoid(self.gate(fused)) * reduced

    forward = mmf_forward
