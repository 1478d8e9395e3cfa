"""Paired image/mask ingestion, augmentation and batching."""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image, ImageEnhance, UnidentifiedImageError
from torch.utils.data import Dataset

from .config import RGB_MEAN, RGB_STD, AugmentSpec
from .errors import CorruptImage, DatasetError, UnpairedFile, UnreadableImage

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
MASK_SUFFIXES = {".png"}
MASK_THRESHOLD = 128


@dataclass(frozen=True)
class PairPaths:
    name: str
    image: Path
    mask: Path


@dataclass
class SamplePair:
    """One RGB image (uint8 H x W x 3) and its binary mask (uint8 H x W in {0, 1})."""

    name: str
    image: np.ndarray
    mask: np.ndarray
    original_size: tuple[int, int]


@dataclass
class Batch:
    images: torch.Tensor
    masks: torch.Tensor
    names: list[str]
    original_sizes: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.names)

    def to(self, device: Union[str, torch.device]) -> "Batch":
        return replace(self, images=self.images.to(device), masks=self.masks.to(device))


def _index(directory: Path, suffixes: set[str]) -> dict[str, Path]:
    if not directory.is_dir():
        raise DatasetError(f"not a directory: {directory}")
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in suffixes}


def _read_manifest(path: Path) -> list[str]:
    if not path.is_file():
        raise DatasetError(f"split manifest not found: {path}")
    return [Path(line.strip()).stem for line in path.read_text().splitlines() if line.strip()]


def discover_pairs(
    root: Union[str, Path],
    split_manifest: Optional[Union[str, Path]] = None,
    images_subdir: str = "Imgs",
    gt_subdir: str = "GT",
) -> list[PairPaths]:
    """Sorted image/mask path pairs under `root`, optionally restricted to a manifest."""
    root = Path(root)
    images = _index(root / images_subdir, IMAGE_SUFFIXES)
    masks = _index(root / gt_subdir, MASK_SUFFIXES)
    if split_manifest is not None:
        names = _read_manifest(Path(split_manifest))
        for name in names:
            if name not in images or name not in masks:
                raise UnpairedFile(f"'{name}' from the manifest lacks an image or a mask")
    else:
        unpaired = sorted(images.keys() ^ masks.keys())
        if unpaired:
            raise UnpairedFile(f"'{unpaired[0]}' has no counterpart ({len(unpaired)} unpaired names)")
        names = list(images)
    if not names:
        raise DatasetError(f"no image/mask pairs under {root}")
    return [PairPaths(name, images[name], masks[name]) for name in sorted(names)]


def binarize(mask: np.ndarray) -> np.ndarray:
    """Boolean foreground mask shared by training and evaluation.

    Integer masks are 8-bit gray and split at 128, float masks at 0.5. A
    boolean mask is already binary and comes back unchanged.
    """
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return mask
    if np.issubdtype(mask.dtype, np.integer):
        return mask >= MASK_THRESHOLD
    return mask >= 0.5


def read_image(path: Path, error: type = UnreadableImage) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise error(f"cannot read {path}: {exc}") from exc


def read_pair(paths: PairPaths) -> SamplePair:
    image = read_image(paths.image, CorruptImage)
    try:
        with Image.open(paths.mask) as img:
            mask = np.asarray(img.convert("L"))
    except (UnidentifiedImageError, OSError) as exc:
        raise CorruptImage(f"cannot read {paths.mask}: {exc}") from exc
    if mask.shape != image.shape[:2]:
        raise CorruptImage(f"'{paths.name}': mask {mask.shape} does not match image {image.shape[:2]}")
    return SamplePair(paths.name, image, binarize(mask).astype(np.uint8), original_size=image.shape[:2])


def load_pairs(
    root: Union[str, Path],
    split_manifest: Optional[Union[str, Path]] = None,
    images_subdir: str = "Imgs",
    gt_subdir: str = "GT",
) -> list[SamplePair]:
    return [read_pair(p) for p in discover_pairs(root, split_manifest, images_subdir, gt_subdir)]


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample) regardless of worker layout."""
    return np.random.default_rng([seed, epoch, index])


def resize_pair(pair: SamplePair, size: int) -> SamplePair:
    if pair.image.shape[:2] == (size, size):
        return pair
    image = np.asarray(Image.fromarray(pair.image).resize((size, size), Image.BILINEAR))
    mask = np.asarray(Image.fromarray(pair.mask).resize((size, size), Image.NEAREST))
    return replace(pair, image=image, mask=mask)


def augment(pair: SamplePair, spec: AugmentSpec, rng: np.random.Generator, size: Optional[int] = 384) -> SamplePair:
    """Flip and crop image and mask together, jitter image colors, then resize to `size`."""
    image, mask = pair.image, pair.mask

    if rng.random() < spec.hflip_prob:
        image, mask = image[:, ::-1], mask[:, ::-1]

    lo, hi = spec.crop_scale_range
    scale = rng.uniform(lo, hi) if hi > lo else hi
    h, w = mask.shape
    ch, cw = max(1, round(h * scale)), max(1, round(w * scale))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    image = image[top : top + ch, left : left + cw]
    mask = mask[top : top + ch, left : left + cw]

    jitter = spec.color_jitter
    enhancers = (
        (ImageEnhance.Brightness, jitter.brightness),
        (ImageEnhance.Contrast, jitter.contrast),
        (ImageEnhance.Color, jitter.saturation),
    )
    if any(delta > 0 for _, delta in enhancers):
        picture = Image.fromarray(np.ascontiguousarray(image))
        for enhancer, delta in enhancers:
            if delta > 0:
                picture = enhancer(picture).enhance(rng.uniform(1 - delta, 1 + delta))
        image = np.asarray(picture)

    out = replace(pair, image=np.ascontiguousarray(image), mask=np.ascontiguousarray(mask))
    return resize_pair(out, size) if size is not None else out


def to_tensors(pair: SamplePair, mean=RGB_MEAN, std=RGB_STD) -> tuple[torch.Tensor, torch.Tensor]:
    """Channel-normalized float image 3 x H x W and float mask 1 x H x W."""
    image = torch.from_numpy(np.ascontiguousarray(pair.image)).permute(2, 0, 1).float() / 255.0
    image = (image - torch.tensor(mean).view(3, 1, 1)) / torch.tensor(std).view(3, 1, 1)
    mask = torch.from_numpy(np.ascontiguousarray(pair.mask)).float().unsqueeze(0)
    return image, mask


def collate_batch(pairs: Sequence[SamplePair]) -> Batch:
    """Stack same-sized pairs into one batch, keeping their order."""
    if not pairs:
        raise DatasetError("cannot collate an empty batch")
    tensors = [to_tensors(p) for p in pairs]
    return Batch(
        images=torch.stack([t[0] for t in tensors]),
        masks=torch.stack([t[1] for t in tensors]),
        names=[p.name for p in pairs],
        original_sizes=[tuple(p.original_size) for p in pairs],
    )


def collate(pairs: Sequence[SamplePair], batch_size: int) -> list[Batch]:
    """Consecutive batches of `batch_size`; the last one may be smaller."""
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    return [collate_batch(pairs[i : i + batch_size]) for i in range(0, len(pairs), batch_size)]


class CamouflageDataset(Dataset):
    """Lazily loaded training pairs with per-sample deterministic augmentation."""

    def __init__(self, entries: Sequence[PairPaths], size: int, spec: Optional[AugmentSpec] = None, seed: int = 0):
        self.entries = list(entries)
        self.size = size
        self.spec = spec
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> SamplePair:
        pair = read_pair(self.entries[index])
        if self.spec is None:
            return resize_pair(pair, self.size)
        return augment(pair, self.spec, sample_rng(self.seed, self.epoch, index), self.size)
