"""Configuration models and config-file parsing for DRRNet."""

import os
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

STAGE_STRIDES = [4, 8, 16, 32]
TINY_STAGE_CHANNELS = [16, 32, 64, 128]

# Large-corpus RGB statistics shared with ImageNet-pretrained backbones.
RGB_MEAN = (0.485, 0.456, 0.406)
RGB_STD = (0.229, 0.224, 0.225)

PVT_VARIANTS: dict[str, dict[str, list[int]]] = {
    "b0": {"dims": [32, 64, 160, 256], "heads": [1, 2, 5, 8], "mlp_ratios": [8, 8, 4, 4], "depths": [2, 2, 2, 2]},
    "b1": {"dims": [64, 128, 320, 512], "heads": [1, 2, 5, 8], "mlp_ratios": [8, 8, 4, 4], "depths": [2, 2, 2, 2]},
    "b2": {"dims": [64, 128, 320, 512], "heads": [1, 2, 5, 8], "mlp_ratios": [8, 8, 4, 4], "depths": [3, 4, 6, 3]},
    "b3": {"dims": [64, 128, 320, 512], "heads": [1, 2, 5, 8], "mlp_ratios": [8, 8, 4, 4], "depths": [3, 4, 18, 3]},
    "b4": {"dims": [64, 128, 320, 512], "heads": [1, 2, 5, 8], "mlp_ratios": [8, 8, 4, 4], "depths": [3, 8, 27, 3]},
    "b5": {"dims": [64, 128, 320, 512], "heads": [1, 2, 5, 8], "mlp_ratios": [4, 4, 4, 4], "depths": [3, 6, 40, 3]},
}

PAPER_WIDTH = 64
TINY_WIDTH = 32

DETERMINISTIC_ENV = "DRRNET_DETERMINISTIC"

FusionMode = Literal["cat", "add"]


class BackboneConfig(BaseModel):
    """Feature extractor selection."""

    profile: Literal["paper", "tiny"] = "tiny"
    variant: Literal["b0", "b1", "b2", "b3", "b4", "b5"] = "b5"
    stage_channels: list[int] = Field(default_factory=lambda: list(TINY_STAGE_CHANNELS))
    stage_strides: list[int] = Field(default_factory=lambda: list(STAGE_STRIDES))
    pretrained_weights_path: Optional[Path] = None
    drop_path_rate: float = Field(default=0.1, ge=0.0, lt=1.0)

    @model_validator(mode="before")
    @classmethod
    def _profile_channels(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("profile") == "paper" and not data.get("stage_channels"):
            variant = data.get("variant", "b5")
            if variant in PVT_VARIANTS:
                data = {**data, "stage_channels": list(PVT_VARIANTS[variant]["dims"])}
        return data

    @field_validator("stage_channels")
    @classmethod
    def _increasing(cls, value: list[int]) -> list[int]:
        if len(value) != 4 or any(c <= 0 for c in value):
            raise ValueError("stage_channels must be 4 positive ints")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("stage_channels must be strictly increasing")
        return value

    @field_validator("stage_strides")
    @classmethod
    def _fixed_strides(cls, value: list[int]) -> list[int]:
        if value != STAGE_STRIDES:
            raise ValueError(f"stage_strides must be exactly {STAGE_STRIDES}")
        return value

    @model_validator(mode="after")
    def _paper_matches_variant(self) -> "BackboneConfig":
        if self.profile == "paper" and self.stage_channels != PVT_VARIANTS[self.variant]["dims"]:
            raise ValueError(
                f"paper profile {self.variant} has stage channels {PVT_VARIANTS[self.variant]['dims']}"
            )
        return self


class ModelConfig(BaseModel):
    """Network architecture: backbone, working width and fusion-mode toggles."""

    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    width: int = TINY_WIDTH
    ocm_fusion: FusionMode = "cat"
    mdm_fusion: FusionMode = "cat"
    mmf_fusion: FusionMode = "cat"
    se_reduction: int = Field(default=4, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _profile_width(cls, data: Any) -> Any:
        if isinstance(data, dict) and "width" not in data:
            backbone = data.get("backbone")
            profile = backbone.get("profile") if isinstance(backbone, dict) else getattr(backbone, "profile", None)
            if profile == "paper":
                data = {**data, "width": PAPER_WIDTH}
        return data

    @field_validator("width")
    @classmethod
    def _even_width(cls, value: int) -> int:
        if value < 2 or value % 2:
            raise ValueError("width must be a positive even number")
        return value


class ColorJitter(BaseModel):
    """Maximum relative deltas for photometric augmentation."""

    brightness: float = Field(default=0.2, ge=0.0, le=1.0)
    contrast: float = Field(default=0.2, ge=0.0, le=1.0)
    saturation: float = Field(default=0.2, ge=0.0, le=1.0)


class AugmentSpec(BaseModel):
    """Training-time augmentation: flip, scale-jittered crop, color enhancement."""

    hflip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    crop_scale_range: tuple[float, float] = (0.75, 1.0)
    color_jitter: ColorJitter = Field(default_factory=ColorJitter)
    seed: int = 0

    @field_validator("crop_scale_range")
    @classmethod
    def _valid_range(cls, value: tuple[float, float]) -> tuple[float, float]:
        lo, hi = value
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("crop_scale_range must satisfy 0 < lo <= hi <= 1")
        return value

    @classmethod
    def disabled(cls) -> "AugmentSpec":
        """Spec that leaves every sample untouched apart from the resize."""
        return cls(
            hflip_prob=0.0,
            crop_scale_range=(1.0, 1.0),
            color_jitter=ColorJitter(brightness=0.0, contrast=0.0, saturation=0.0),
        )


class TrainConfig(ModelConfig):
    """Everything `train` needs: the model plus optimization and data settings."""

    lr: float = Field(default=1e-4, gt=0.0)
    lr_decay_rate: float = Field(default=0.1, gt=0.0, le=1.0)
    lr_decay_epochs: int = Field(default=25, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)
    epochs: int = Field(default=80, gt=0)
    batch_size: int = Field(default=8, gt=0)
    input_size: int = Field(default=384, gt=0)
    seed: int = 42
    max_steps: Optional[int] = Field(default=None, gt=0)
    log_every: int = Field(default=10, gt=0)
    checkpoint_every: int = Field(default=1, gt=0)
    checkpoint_dir: Path = Path("checkpoints")
    train_root: Optional[Path] = None
    val_root: Optional[Path] = None
    split_manifest: Optional[Path] = None
    images_subdir: str = "Imgs"
    gt_subdir: str = "GT"
    num_workers: int = Field(default=0, ge=0)
    augment: AugmentSpec = Field(default_factory=AugmentSpec)
    deterministic: bool = False
    device: str = "cpu"
    run_name: Optional[str] = None
    ledger_path: Optional[Path] = None

    @field_validator("input_size")
    @classmethod
    def _stride_aligned(cls, value: int) -> int:
        if value % STAGE_STRIDES[-1]:
            raise ValueError(f"input_size must be divisible by {STAGE_STRIDES[-1]}")
        return value

    def architecture(self) -> ModelConfig:
        """Architecture part of this config."""
        return ModelConfig.model_validate(self.model_dump(include=set(ModelConfig.model_fields)))


def deterministic_requested(config: Optional[TrainConfig] = None) -> bool:
    """True if the config or the environment asks for the deterministic contract."""
    if config is not None and config.deterministic:
        return True
    return os.environ.get(DETERMINISTIC_ENV, "").strip() in {"1", "true", "yes"}


def _parse_value(raw: str) -> Any:
    value = raw.strip()
    if value == "" or value.lower() in {"none", "null"}:
        return None
    if value.startswith("[") and value.endswith("]"):
        value = value[1:-1]
        return [item.strip() for item in value.split(",") if item.strip()]
    if "," in value:
        return [item.strip() for item in value.split(",")]
    return value


def _assign(tree: dict, dotted_key: str, value: Any) -> None:
    parts = dotted_key.split(".")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"key '{dotted_key}' conflicts with scalar '{part}'")
        node = child
    node[parts[-1]] = value


def parse_config_text(text: str) -> dict:
    """Parse flat `key = value` lines with dotted keys into a nested dict."""
    tree: dict = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value', got '{line}'")
        key, raw = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {number}: empty key")
        _assign(tree, key, _parse_value(raw))
    return tree


def parse_overrides(items: list[str]) -> dict:
    """Turn CLI `key=value` overrides into the same nested form as a config file."""
    return parse_config_text("\n".join(items))


def _merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _strip_none(tree: dict) -> dict:
    return {k: _strip_none(v) if isinstance(v, dict) else v for k, v in tree.items() if v is not None}


def build_config(values: dict) -> TrainConfig:
    """Validate a nested dict into a TrainConfig, reporting problems as ConfigError."""
    try:
        return TrainConfig.model_validate(_strip_none(values))
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(problems) from exc


def load_config(path: Optional[Path] = None, overrides: Optional[dict] = None) -> TrainConfig:
    """Load a config file and apply overrides on top of it."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values = parse_config_text(path.read_text())
    if overrides:
        values = _merge(values, overrides)
    return build_config(values)
