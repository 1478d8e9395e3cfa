"""Multi-scale feature extractors: a PVTv2 re-implementation and a tiny CNN stand-in.

Weights archive format: a single `.npz` file whose keys are dotted parameter
and buffer names of the extractor body (e.g. `patch_embed1.proj.weight`,
`block3.12.attn.kv.weight`) and whose values are float32 arrays of the
parameter's shape. Keys of a classification head (`head.*`) are ignored.
"""

import logging
import math
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn as nn
from timm.layers import DropPath, trunc_normal_

from .config import PVT_VARIANTS, BackboneConfig
from .errors import InvalidResolution, MissingWeights, ShapeMismatch
from .layers import ConvBNReLU

logger = logging.getLogger(__name__)

IGNORED_PREFIXES = ("head.",)


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.constant_(m.bias, 0)
    elif isinstance(m, nn.LayerNorm):
        nn.init.constant_(m.bias, 0)
        nn.init.constant_(m.weight, 1.0)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
        m.weight.data.normal_(0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            m.bias.data.zero_()


class DWConv(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, 3, 1, 1, groups=dim)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, n, c = x.shape
        x = self.dwconv(x.transpose(1, 2).reshape(b, c, h, w))
        return x.flatten(2).transpose(1, 2)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = DWConv(hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        return self.fc2(self.act(self.dwconv(self.fc1(x), h, w)))


class Attention(nn.Module):
    """Multi-head attention with spatially reduced keys and values."""

    def __init__(self, dim: int, num_heads: int, sr_ratio: int = 1):
        super().__init__()
        if dim % num_heads:
            raise ShapeMismatch(f"dim {dim} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim, bias=True)
        self.kv = nn.Linear(dim, dim * 2, bias=True)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.norm = nn.LayerNorm(dim)

    def reduced_tokens(self, h: int, w: int) -> int:
        """Number of key/value tokens for an h x w query grid."""
        if self.sr_ratio > 1:
            return (h // self.sr_ratio) * (w // self.sr_ratio)
        return h * w

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, n, c = x.shape
        heads = self.num_heads
        q = self.q(x).reshape(b, n, heads, c // heads).permute(0, 2, 1, 3)
        if self.sr_ratio > 1:
            x_ = self.sr(x.permute(0, 2, 1).reshape(b, c, h, w)).reshape(b, c, -1).permute(0, 2, 1)
            x_ = self.norm(x_)
        else:
            x_ = x
        kv = self.kv(x_).reshape(b, -1, 2, heads, c // heads).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(x)


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int, sr_ratio: int, drop_path: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads, sr_ratio)
        self.drop_path = DropPath(drop_path) if drop_path > 0.0 else nn.Identity()
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        x = x + self.drop_path(self.attn(self.norm1(x), h, w))
        return x + self.drop_path(self.mlp(self.norm2(x), h, w))


class OverlapPatchEmbed(nn.Module):
    def __init__(self, patch_size: int, stride: int, in_chans: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Conv2d(in_chans, embed_dim, patch_size, stride=stride, padding=patch_size // 2)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        x = self.proj(x)
        _, _, h, w = x.shape
        return self.norm(x.flatten(2).transpose(1, 2)), h, w


class PyramidVisionTransformerV2(nn.Module):
    """Four-stage PVTv2 feature body (no classification head)."""

    def __init__(self, variant: str = "b5", drop_path_rate: float = 0.1, sr_ratios=(8, 4, 2, 1)):
        super().__init__()
        settings = PVT_VARIANTS[variant]
        dims, depths = settings["dims"], settings["depths"]
        rates = torch.linspace(0, drop_path_rate, sum(depths)).tolist()
        cursor = 0
        for i in range(4):
            embed = OverlapPatchEmbed(
                patch_size=7 if i == 0 else 3,
                stride=4 if i == 0 else 2,
                in_chans=3 if i == 0 else dims[i - 1],
                embed_dim=dims[i],
            )
            blocks = nn.ModuleList(
                Block(dims[i], settings["heads"][i], settings["mlp_ratios"][i], sr_ratios[i], rates[cursor + j])
                for j in range(depths[i])
            )
            cursor += depths[i]
            setattr(self, f"patch_embed{i + 1}", embed)
            setattr(self, f"block{i + 1}", blocks)
            setattr(self, f"norm{i + 1}", nn.LayerNorm(dims[i]))
        self.apply(_init_weights)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        b = x.shape[0]
        features = []
        for i in range(1, 5):
            x, h, w = getattr(self, f"patch_embed{i}")(x)
            for blk in getattr(self, f"block{i}"):
                x = blk(x, h, w)
            x = getattr(self, f"norm{i}")(x)
            x = x.reshape(b, h, w, -1).permute(0, 3, 1, 2).contiguous()
            features.append(x)
        return features


class TinyBackbone(nn.Module):
    """Small strided CNN with the same stride pattern as the transformer body."""

    def __init__(self, stage_channels: list[int]):
        super().__init__()
        stages = []
        cin = 3
        for index, cout in enumerate(stage_channels):
            layers = [ConvBNReLU(cin, cout, 3, stride=2)]
            if index == 0:
                layers.append(ConvBNReLU(cout, cout, 3, stride=2))
            stages.append(nn.Sequential(*layers))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class Backbone(nn.Module):
    """Feature extractor E producing the pyramid x1..x4."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        if config.profile == "paper":
            self.body: nn.Module = PyramidVisionTransformerV2(config.variant, config.drop_path_rate)
        else:
            self.body = TinyBackbone(config.stage_channels)

    @property
    def stage_channels(self) -> list[int]:
        return list(self.config.stage_channels)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        return extract_features(self, images)


def build_backbone(config: BackboneConfig, load_pretrained: bool = True) -> Backbone:
    """Construct the extractor for `config`, loading weights when a path is set."""
    backbone = Backbone(config)
    if load_pretrained and config.pretrained_weights_path is not None:
        load_weights(backbone.body, config.pretrained_weights_path)
        logger.info("Loaded backbone weights from %s", config.pretrained_weights_path)
    elif load_pretrained and config.profile == "paper":
        logger.warning("Paper-profile backbone has no pretrained weights; using random init")
    return backbone


def extract_features(backbone: Backbone, images: torch.Tensor) -> list[torch.Tensor]:
    """Run the extractor; H and W must be multiples of the deepest stride."""
    stride = backbone.config.stage_strides[-1]
    h, w = images.shape[-2:]
    if h % stride or w % stride:
        raise InvalidResolution(f"input {h}x{w} is not divisible by {stride}")
    return backbone.body(images)


def save_weights(module: nn.Module, path: Union[str, Path]) -> Path:
    """Write the module's state as a flat name -> float32 array archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        name: tensor.detach().cpu().to(torch.float32).numpy()
        for name, tensor in module.state_dict().items()
        if tensor.is_floating_point()
    }
    with path.open("wb") as handle:
        np.savez(handle, **arrays)
    return path


def load_weights(module: nn.Module, path: Union[str, Path]) -> None:
    """Copy a weights archive into `module`, requiring every float entry to match."""
    path = Path(path)
    try:
        with np.load(path) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (OSError, ValueError) as exc:
        raise MissingWeights(f"cannot read weights file {path}: {exc}") from exc

    skipped = [name for name in arrays if name.startswith(IGNORED_PREFIXES)]
    if skipped:
        logger.info("Ignoring %d classifier entries in %s", len(skipped), path)

    state = module.state_dict()
    expected = {name for name, tensor in state.items() if tensor.is_floating_point()}
    missing = sorted(expected - arrays.keys())
    if missing:
        raise ShapeMismatch(f"weights file lacks {len(missing)} entries, e.g. '{missing[0]}'")
    unexpected = sorted(n for n in arrays.keys() - state.keys() if not n.startswith(IGNORED_PREFIXES))
    if unexpected:
        raise ShapeMismatch(f"weights file has {len(unexpected)} unknown entries, e.g. '{unexpected[0]}'")

    loaded = {}
    for name in expected:
        array = arrays[name]
        if tuple(array.shape) != tuple(state[name].shape):
            raise ShapeMismatch(f"'{name}' has shape {tuple(array.shape)}, expected {tuple(state[name].shape)}")
        loaded[name] = torch.from_numpy(np.asarray(array, dtype=np.float32))
    module.load_state_dict(loaded, strict=False)
