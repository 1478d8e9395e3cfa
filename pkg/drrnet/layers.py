"""Building blocks shared by the encoders, the fusion neck and the decoder."""

from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

FFT_NORM = "backward"


class BatchNorm2d(nn.BatchNorm2d):
    """BatchNorm that uses running statistics when a training batch has one value per channel."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] * x.shape[2] * x.shape[3] == 1:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias, False, 0.0, self.eps)
        return super().forward(x)


class ConvBNReLU(nn.Module):
    """Conv -> BatchNorm -> ReLU with 'same' padding for odd kernels."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        dilation: int = 1,
        relu: bool = True,
    ):
        super().__init__()
        self.conv = nn.Conv2d(
            in_channels,
            out_channels,
            kernel_size,
            stride=stride,
            padding=dilation * (kernel_size // 2),
            dilation=dilation,
            bias=False,
        )
        self.bn = BatchNorm2d(out_channels)
        self.act = nn.ReLU(inplace=True) if relu else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.bn(self.conv(x)))


class SEBlock(nn.Module):
    """Squeeze-and-excitation channel attention."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.squeeze = nn.AdaptiveAvgPool2d(1)
        self.excitation = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.excitation(self.squeeze(x))


class DepthwiseSeparableConv(nn.Module):
    """Per-channel spatial filter followed by a 1x1 channel mixer."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, norm_act: bool = False):
        super().__init__()
        self.depthwise = nn.Conv2d(
            in_channels, in_channels, kernel_size, padding=kernel_size // 2, groups=in_channels
        )
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1)
        self.post = (
            nn.Sequential(BatchNorm2d(out_channels), nn.ReLU(inplace=True)) if norm_act else nn.Identity()
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.post(self.pointwise(self.depthwise(x)))


class Upsample2x(nn.Module):
    """Doubles the spatial size and keeps the channel count.

    Pixel shuffle when the channels split into 4, bilinear otherwise; a 1x1
    conv restores the width in both cases.
    """

    def __init__(self, channels: int):
        super().__init__()
        if channels % 4 == 0:
            self.shuffle: Optional[nn.Module] = nn.PixelShuffle(2)
            self.proj = nn.Conv2d(channels // 4, channels, 1)
        else:
            self.shuffle = None
            self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.shuffle is not None:
            x = self.shuffle(x)
        else:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.proj(x)


def resize_to(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """Bilinear resize to `size`; a no-op when the size already matches."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
