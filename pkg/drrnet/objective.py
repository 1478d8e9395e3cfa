"""Deep-supervision objective: boundary-weighted BCE plus weighted IoU on every output."""

from typing import Optional

import torch
import torch.nn.functional as F

from .decoder import PredictionSet
from .errors import NonFiniteInput, ShapeMismatch
from .layers import resize_to

BOUNDARY_KERNEL = 31
BOUNDARY_SCALE = 5.0


def _check(logits: torch.Tensor, mask: torch.Tensor, weight: torch.Tensor) -> None:
    if logits.shape != mask.shape or weight.shape != mask.shape:
        raise ShapeMismatch(
            f"logits {tuple(logits.shape)}, mask {tuple(mask.shape)} and weight {tuple(weight.shape)} differ"
        )
    if not torch.isfinite(logits).all():
        raise NonFiniteInput("logits contain NaN or infinite values")


def boundary_weight(mask: torch.Tensor, kernel_size: int = BOUNDARY_KERNEL, scale: float = BOUNDARY_SCALE) -> torch.Tensor:
    """w = scale * |local mean of G - G|; zero wherever the window around a pixel is constant."""
    pooled = F.avg_pool2d(mask, kernel_size, stride=1, padding=kernel_size // 2, count_include_pad=False)
    return scale * (pooled - mask).abs()


def weighted_bce(logits: torch.Tensor, mask: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    _check(logits, mask, weight)
    bce = F.binary_cross_entropy_with_logits(logits, mask, reduction="none")
    scale = 1 + weight
    per_sample = (scale * bce).sum(dim=(1, 2, 3)) / scale.sum(dim=(1, 2, 3))
    return per_sample.mean()


def weighted_iou(logits: torch.Tensor, mask: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """1 - weighted intersection over weighted union; 0 for an empty union."""
    _check(logits, mask, weight)
    prob = torch.sigmoid(logits)
    scale = 1 + weight
    inter = (scale * mask * prob).sum(dim=(1, 2, 3))
    union = (scale * (mask + prob - mask * prob)).sum(dim=(1, 2, 3))
    nonempty = union > 0
    safe_union = torch.where(nonempty, union, torch.ones_like(union))
    per_sample = torch.where(nonempty, 1 - inter / safe_union, torch.zeros_like(union))
    return per_sample.mean()


def level_losses(
    predictions: PredictionSet, mask: torch.Tensor, weight: Optional[torch.Tensor] = None
) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """(bce, iou) for O4..O0, each prediction resized to the mask resolution."""
    if weight is None:
        weight = boundary_weight(mask)
    size = mask.shape[-2:]
    return [
        (weighted_bce(resize_to(o, size), mask, weight), weighted_iou(resize_to(o, size), mask, weight))
        for o in predictions.logits
    ]


def total_loss(predictions: PredictionSet, mask: torch.Tensor, weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    terms = level_losses(predictions, mask, weight)
    return sum(bce + iou for bce, iou in terms)
