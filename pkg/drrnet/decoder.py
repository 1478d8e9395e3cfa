"""Global rough decoder and the dual reverse refinement cascade."""

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import IncompletePyramid, ResolutionMismatch
from .layers import FFT_NORM, ConvBNReLU, DepthwiseSeparableConv, SEBlock, resize_to, upsample2x

DW_KERNELS = (3, 5, 7)


@dataclass
class PredictionSet:
    """Logit maps ordered coarse to fine: [O4, O3, O2, O1, O0]."""

    logits: list[torch.Tensor]
    final_index: int = 0

    def __post_init__(self):
        if len(self.logits) != 5:
            raise IncompletePyramid(f"expected 5 prediction levels, got {len(self.logits)}")

    def level(self, index: int) -> torch.Tensor:
        """O_index, with 0 the final output and 4 the coarse map."""
        if not 0 <= index <= 4:
            raise ValueError(f"level must be in 0..4, got {index}")
        return self.logits[4 - index]

    @property
    def final(self) -> torch.Tensor:
        return self.level(self.final_index)

    @property
    def resolutions(self) -> list[tuple[int, int]]:
        return [tuple(o.shape[-2:]) for o in self.logits]

    def probabilities(self, index: int = 0, size: Optional[Sequence[int]] = None) -> torch.Tensor:
        logits = self.level(index)
        if size is not None:
            logits = resize_to(logits, size)
        return torch.sigmoid(logits)


def gelu_gate(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x) * x


class GlobalRoughDecoder(nn.Module):
    """Multi-scale attention head producing the coarse map O4."""

    def __init__(self, in_channels: int, width: int, reduction: int = 4):
        super().__init__()
        self.base = ConvBNReLU(in_channels + width, width, 1)
        self.context = ConvBNReLU(width, width, 3)
        self.spread = nn.ModuleList(DepthwiseSeparableConv(width, width, k) for k in DW_KERNELS)
        self.se = SEBlock(len(DW_KERNELS) * width, reduction)
        self.refine = nn.ModuleList(DepthwiseSeparableConv(width, width, k) for k in DW_KERNELS)
        self.project = nn.Conv2d(len(DW_KERNELS) * width, width, 1)
        self.merge = nn.Conv2d(2 * width, width, 1)
        self.head = nn.Conv2d(width, 1, 3, padding=1)

    def grd_forward(self, x4: torch.Tensor, f4: torch.Tensor) -> torch.Tensor:
        if x4.shape[-2:] != f4.shape[-2:]:
            raise ResolutionMismatch(f"x4 {tuple(x4.shape[-2:])} and f4 {tuple(f4.shape[-2:])} differ")
        p_s0 = self.base(torch.cat([x4, f4], dim=1))
        p_s1 = self.context(p_s0)
        p_s2 = self.se(torch.cat([conv(p_s1) for conv in self.spread], dim=1))
        chunks = torch.chunk(p_s2, len(DW_KERNELS), dim=1)
        p_s3 = self.project(torch.cat([gelu_gate(conv(c)) for conv, c in zip(self.refine, chunks)], dim=1))
        return self.head(self.merge(torch.cat([p_s0, p_s3], dim=1)) + p_s1)

    forward = grd_forward


class DualReverseRefinement(nn.Module):
    """Refines a prediction using spatial and spectral branches weighted by reverse priors."""

    def __init__(self, width: int, reduction: int = 4):
        super().__init__()
        self.combine = ConvBNReLU(width + 2, width, 3)
        self.spatial = DepthwiseSeparableConv(width, width, 3, norm_act=True)
        self.modulation = nn.Conv2d(width, width, 1)
        self.attend = ConvBNReLU(3 * width, width, 3)
        self.se = SEBlock(width, reduction)
        self.head = nn.Conv2d(2 * width, 1, 3, padding=1)

    def frequency(self, f_c: torch.Tensor) -> torch.Tensor:
        """F_f: per-bin weights from a conv over the spectrum's real part."""
        spectrum = torch.fft.rfft2(f_c, norm=FFT_NORM)
        weights = self.modulation(spectrum.real)
        return torch.fft.irfft2(spectrum * weights, s=f_c.shape[-2:], norm=FFT_NORM)

    @staticmethod
    def reverse_weighted(f_c: torch.Tensor, prior: torch.Tensor, prior2: torch.Tensor) -> torch.Tensor:
        """F_w = (R1 + R2) * F_c with R = 1 - sigmoid(prior)."""
        return ((1 - torch.sigmoid(prior)) + (1 - torch.sigmoid(prior2))) * f_c

    def drrm_forward(self, feature: torch.Tensor, prior: torch.Tensor, prior2: torch.Tensor) -> torch.Tensor:
        size = feature.shape[-2:]
        prior = resize_to(prior, size)
        prior2 = resize_to(prior2, size)
        f_c = self.combine(torch.cat([feature, prior, prior2], dim=1))
        f_s = self.spatial(f_c)
        f_f = self.frequency(f_c)
        f_attn = self.se(self.attend(torch.cat([f_c, f_s, f_f], dim=1)))
        f_w = self.reverse_weighted(f_c, prior, prior2)
        return self.head(torch.cat([f_attn, f_w], dim=1)) + prior + prior2

    forward = drrm_forward


class RefinementDecoder(nn.Module):
    """GRD followed by four DRRM stages, emitting O4..O0."""

    def __init__(self, deepest_channels: int, width: int, reduction: int = 4):
        super().__init__()
        self.rough = GlobalRoughDecoder(deepest_channels, width, reduction)
        self.refiners = nn.ModuleList(DualReverseRefinement(width, reduction) for _ in range(4))

    def decode_all(self, x4: torch.Tensor, fused: Sequence[Optional[torch.Tensor]]) -> PredictionSet:
        if len(fused) != 4 or any(f is None for f in fused):
            raise IncompletePyramid("fused pyramid must hold levels 1..4")
        f1, f2, f3, f4 = fused
        o4 = self.rough(x4, f4)
        o3 = self.refiners[0](f3, o4, o4)
        o2 = self.refiners[1](f2, o3, o4)
        o1 = self.refiners[2](f1, o2, o3)
        o0 = self.refiners[3](upsample2x(f1), o1, o2)
        return PredictionSet([o4, o3, o2, o1, o0])

    forward = decode_all
