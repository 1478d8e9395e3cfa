"""COD evaluation metrics: MAE, S-measure, mean E-measure and weighted F-measure."""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from py_sod_metrics import Smeasure, WeightedFmeasure
from pydantic import BaseModel, Field

from .data import binarize
from .errors import DatasetError, ShapeMismatch, UnpairedFile, UnreadableImage

logger = logging.getLogger(__name__)

EPS = np.spacing(1)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
AGGREGATE_NAME = "AGGREGATE"
CSV_HEADER = ["name", "mae", "s_alpha", "e_phi", "f_beta_w"]


class ImageScores(BaseModel):
    """Scores of one prediction/GT pair."""

    name: str
    mae: float = Field(ge=0.0, le=1.0)
    s_alpha: float = Field(ge=0.0, le=1.0)
    e_phi: float = Field(ge=0.0, le=1.0)
    f_beta_w: float = Field(ge=0.0, le=1.0)


class EvalRecord(BaseModel):
    """Per-image scores in sorted-name order plus their means."""

    per_image: list[ImageScores]
    aggregate: ImageScores

    @classmethod
    def from_scores(cls, per_image: list[ImageScores]) -> "EvalRecord":
        if not per_image:
            raise DatasetError("no images to aggregate")
        means = {
            key: float(np.mean([getattr(s, key) for s in per_image]))
            for key in ("mae", "s_alpha", "e_phi", "f_beta_w")
        }
        return cls(per_image=per_image, aggregate=ImageScores(name=AGGREGATE_NAME, **means))


def _clamp(value: float) -> float:
    return float(min(max(value, 0.0), 1.0))


def _as_arrays(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and GT {gt.shape} differ")
    return pred.astype(np.float64), gt.astype(bool)


def normalize_prediction(pred: np.ndarray) -> np.ndarray:
    """Map a stored prediction into [0, 1]: 8-bit divided by 255, min-max only when out of range."""
    if pred.dtype == np.uint8:
        return pred.astype(np.float64) / 255.0
    pred = pred.astype(np.float64)
    lo, hi = pred.min(), pred.max()
    if lo < 0.0 or hi > 1.0:
        pred = (pred - lo) / (hi - lo) if hi > lo else np.zeros_like(pred)
    return pred


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _as_arrays(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


class StructureMeasure(Smeasure):
    """S-measure with degenerate regions pinned.

    A one-pixel region has zero spread, an empty region scores 0 and a
    one-pixel quadrant counts as perfectly similar.
    """

    def s_object(self, x: np.ndarray) -> float:
        if x.size == 0:
            return 0.0
        if x.size == 1:
            mean = float(x[0])
            return 2 * mean / (mean * mean + 1 + EPS)
        return super().s_object(x)

    def ssim(self, pred: np.ndarray, gt: np.ndarray) -> float:
        if pred.size == 0:
            return 0.0
        if pred.size == 1:
            return 1.0
        return super().ssim(pred, gt)


def s_measure(pred: np.ndarray, gt: np.ndarray, alpha: float = 0.5) -> float:
    """Structure measure: alpha * object similarity + (1 - alpha) * region similarity."""
    pred, gt = _as_arrays(pred, gt)
    return _clamp(StructureMeasure(alpha=alpha).cal_sm(pred, gt))


def e_measure(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean enhanced-alignment measure of the continuous map against the GT."""
    pred, gt = _as_arrays(pred, gt)
    if not gt.any():
        enhanced = 1 - pred
    elif gt.all():
        enhanced = pred
    else:
        gt_f = gt.astype(np.float64)
        d_pred = pred - pred.mean()
        d_gt = gt_f - gt_f.mean()
        align = 2 * d_gt * d_pred / (d_gt * d_gt + d_pred * d_pred + EPS)
        enhanced = (align + 1) ** 2 / 4
    return _clamp(enhanced.mean())


def weighted_fmeasure(pred: np.ndarray, gt: np.ndarray, beta2: float = 1.0) -> float:
    """Weighted F-measure; an all-background GT scores 0."""
    pred, gt = _as_arrays(pred, gt)
    if not gt.any():
        return 0.0
    return _clamp(WeightedFmeasure(beta=beta2).cal_wfm(pred, gt))


def score_pair(name: str, pred: np.ndarray, gt: np.ndarray) -> ImageScores:
    return ImageScores(
        name=name,
        mae=_clamp(mae(pred, gt)),
        s_alpha=s_measure(pred, gt),
        e_phi=e_measure(pred, gt),
        f_beta_w=weighted_fmeasure(pred, gt),
    )


def _index(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise DatasetError(f"not a directory: {directory}")
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"))
    except (UnidentifiedImageError, OSError) as exc:
        raise UnreadableImage(f"cannot read {path}: {exc}") from exc


def _score_file(name: str, pred_path: Path, gt_path: Path) -> ImageScores:
    gt_raw = _read_gray(gt_path)
    pred_raw = _read_gray(pred_path)
    if pred_raw.shape != gt_raw.shape:
        logger.debug("Resizing %s from %s to %s", name, pred_raw.shape, gt_raw.shape)
        resized = Image.fromarray(pred_raw).resize((gt_raw.shape[1], gt_raw.shape[0]), Image.BILINEAR)
        pred_raw = np.asarray(resized)
    return score_pair(name, normalize_prediction(pred_raw), binarize(gt_raw))


def evaluate_dataset(pred_dir: Union[str, Path], gt_dir: Union[str, Path], workers: int = 1) -> EvalRecord:
    """Score every name-matched prediction/GT pair; names must pair up exactly."""
    preds = _index(Path(pred_dir))
    gts = _index(Path(gt_dir))
    unpaired = sorted(preds.keys() ^ gts.keys())
    if unpaired:
        raise UnpairedFile(f"'{unpaired[0]}' has no counterpart ({len(unpaired)} unpaired names)")
    names = sorted(preds)
    if not names:
        raise UnpairedFile(f"no image pairs between {pred_dir} and {gt_dir}")

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        scores = list(pool.map(lambda n: _score_file(n, preds[n], gts[n]), names))
    record = EvalRecord.from_scores(scores)
    logger.info("Evaluated %d images: MAE %.4f", len(scores), record.aggregate.mae)
    return record


def write_csv(record: EvalRecord, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_HEADER)
        for scores in [*record.per_image, record.aggregate]:
            writer.writerow([scores.name, *(f"{getattr(scores, key):.6f}" for key in CSV_HEADER[1:])])
    return path
