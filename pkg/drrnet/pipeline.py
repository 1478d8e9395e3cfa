"""Training loop, checkpoints, inference export, evaluation driver and complexity report."""

import logging
import os
import random
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
from PIL import Image
from pydantic import BaseModel
from torch.utils.data import DataLoader

from .backbone import Attention
from .config import ModelConfig, TrainConfig, deterministic_requested
from .data import (
    IMAGE_SUFFIXES,
    CamouflageDataset,
    PairPaths,
    SamplePair,
    collate_batch,
    discover_pairs,
    read_image,
    read_pair,
    resize_pair,
    to_tensors,
)
from .errors import CheckpointMismatch, DatasetError, NonFiniteLoss, UnreadableImage
from .layers import resize_to
from .metrics import EvalRecord, evaluate_dataset, write_csv
from .network import DRRNet, build_model, count_parameters
from .objective import total_loss
from .repository import RunRepository

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1


class StepLog(BaseModel):
    epoch: int
    step: int
    lr: float
    loss: float
    grad_norm: float


class ComplexityReport(BaseModel):
    params: int
    macs: int
    flops: int
    input_size: int

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def gflops(self) -> float:
        return self.flops / 1e9


@dataclass
class TrainResult:
    checkpoint_path: Path
    loss_log: list[StepLog]
    run_id: Optional[int] = None
    best_path: Optional[Path] = None
    best_val_mae: Optional[float] = None


@dataclass
class Checkpoint:
    """Everything needed to resume training at the next step."""

    epoch: int
    step: int
    model_state: dict
    optimizer_state: Optional[dict]
    config: dict
    rng_state: dict = field(default_factory=dict)
    schema_version: int = CHECKPOINT_SCHEMA_VERSION

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.__dict__, path)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointMismatch(f"checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:
            raise CheckpointMismatch(f"cannot read checkpoint {path}: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
            raise CheckpointMismatch(f"{path} is not a schema {CHECKPOINT_SCHEMA_VERSION} checkpoint")
        return cls(**payload)

    def train_config(self) -> TrainConfig:
        return TrainConfig.model_validate(self.config)


def capture_rng_state() -> dict:
    return {
        "python": random.getstate(),
        "numpy": np.random.get_state(),
        "torch": torch.get_rng_state(),
    }


def restore_rng_state(state: dict) -> None:
    if not state:
        return
    random.setstate(state["python"])
    np.random.set_state(state["numpy"])
    torch.set_rng_state(state["torch"])


def configure_determinism(seed: int, deterministic: bool) -> None:
    """Seed every RNG; in deterministic mode also pin torch to deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Step decay: multiply by the decay rate every `lr_decay_epochs` epochs (1-based)."""
    return config.lr * config.lr_decay_rate ** ((epoch - 1) // config.lr_decay_epochs)


def load_model(checkpoint: Checkpoint, device: Union[str, torch.device] = "cpu") -> DRRNet:
    """Rebuild the network stored in a checkpoint."""
    model = build_model(checkpoint.train_config(), load_pretrained=False)
    try:
        model.load_state_dict(checkpoint.model_state)
    except RuntimeError as exc:
        raise CheckpointMismatch(str(exc).splitlines()[0]) from exc
    return model.to(device)


def _make_loader(dataset: CamouflageDataset, config: TrainConfig, generator: torch.Generator) -> DataLoader:
    return DataLoader(
        dataset,
        batch_size=config.batch_size,
        shuffle=True,
        generator=generator,
        num_workers=config.num_workers,
        collate_fn=collate_batch,
        drop_last=False,
    )


@torch.no_grad()
def level_mae(
    model: DRRNet,
    pairs: Sequence[Union[SamplePair, PairPaths]],
    input_size: int,
    device: Union[str, torch.device] = "cpu",
) -> list[float]:
    """Mean MAE of sigmoid(O_i) at input resolution, ordered O4..O0."""
    was_training = model.training
    model.eval()
    totals = np.zeros(5)
    for item in pairs:
        pair = read_pair(item) if isinstance(item, PairPaths) else item
        image, mask = to_tensors(resize_pair(pair, input_size))
        predictions = model(image.unsqueeze(0).to(device))
        mask = mask.unsqueeze(0).to(device)
        for k, logits in enumerate(predictions.logits):
            prob = torch.sigmoid(resize_to(logits, mask.shape[-2:]))
            totals[k] += (prob - mask).abs().mean().item()
    model.train(was_training)
    return (totals / max(len(pairs), 1)).tolist()


def train(
    config: TrainConfig,
    resume: Optional[Union[str, Path]] = None,
    repository: Optional[RunRepository] = None,
) -> TrainResult:
    """Optimize DRRNet on `config.train_root`, checkpointing every `checkpoint_every` epochs."""
    if config.train_root is None:
        raise DatasetError("train_root is not set")
    deterministic = deterministic_requested(config)
    configure_determinism(config.seed, deterministic)
    device = torch.device(config.device)

    entries = discover_pairs(config.train_root, config.split_manifest, config.images_subdir, config.gt_subdir)
    val_entries = (
        discover_pairs(config.val_root, None, config.images_subdir, config.gt_subdir) if config.val_root else []
    )
    dataset = CamouflageDataset(entries, config.input_size, config.augment, seed=config.seed + config.augment.seed)
    generator = torch.Generator()
    loader = _make_loader(dataset, config, generator)

    model = build_model(config).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas, eps=config.eps, weight_decay=0.0)

    start_epoch, step = 1, 0
    best_val: Optional[float] = None
    if resume is not None:
        checkpoint = Checkpoint.load(resume)
        try:
            model.load_state_dict(checkpoint.model_state)
            optimizer.load_state_dict(checkpoint.optimizer_state)
        except (RuntimeError, ValueError, KeyError) as exc:
            raise CheckpointMismatch(f"cannot resume from {resume}: {str(exc).splitlines()[0]}") from exc
        restore_rng_state(checkpoint.rng_state)
        start_epoch, step = checkpoint.epoch + 1, checkpoint.step
        logger.info("Resuming from %s at epoch %d (step %d)", resume, start_epoch, step)

    if repository is None and config.ledger_path is not None:
        repository = RunRepository(config.ledger_path)
    run_id = None
    if repository is not None:
        run = repository.create_run(
            name=config.run_name or Path(config.checkpoint_dir).name,
            profile=config.backbone.profile,
            seed=config.seed,
            config=config.model_dump(mode="json"),
        )
        run_id = run.id

    checkpoint_dir = Path(config.checkpoint_dir)
    loss_log: list[StepLog] = []
    last_path: Optional[Path] = None
    best_path: Optional[Path] = None
    grad_norm = float("nan")
    logger.info(
        "Training %s profile, %d pairs, %d params on %s",
        config.backbone.profile, len(entries), count_parameters(model), device,
    )

    try:
        model.train()
        epoch = start_epoch - 1
        for epoch in range(start_epoch, config.epochs + 1):
            lr = learning_rate(config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            dataset.set_epoch(epoch)
            generator.manual_seed(config.seed + epoch)
            epoch_losses = []
            for batch in loader:
                batch = batch.to(device)
                loss = total_loss(model(batch.images), batch.masks)
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(step + 1, lr, grad_norm, loss.item())
                optimizer.zero_grad()
                loss.backward()
                grad_norm = float(nn.utils.clip_grad_norm_(model.parameters(), max_norm=float("inf")))
                optimizer.step()
                step += 1
                entry = StepLog(epoch=epoch, step=step, lr=lr, loss=loss.item(), grad_norm=grad_norm)
                loss_log.append(entry)
                epoch_losses.append(entry.loss)
                if repository is not None:
                    repository.log_step(run_id, epoch, step, lr, entry.loss, grad_norm)
                if step % config.log_every == 0:
                    logger.info("epoch %d step %d loss %.4f lr %.2e grad %.3f", epoch, step, entry.loss, lr, grad_norm)
                if config.max_steps is not None and step >= config.max_steps:
                    break

            done = epoch == config.epochs or (config.max_steps is not None and step >= config.max_steps)
            logger.info("epoch %d finished, mean loss %.4f", epoch, float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
            if epoch % config.checkpoint_every == 0 or done:
                last_path = _save(model, optimizer, config, epoch, step, checkpoint_dir)
                if repository is not None:
                    repository.update_progress(run_id, epoch, str(last_path))
            if val_entries:
                val_mae = level_mae(model, val_entries, config.input_size, device)[-1]
                logger.info("epoch %d validation MAE %.4f", epoch, val_mae)
                if best_val is None or val_mae < best_val:
                    best_val = val_mae
                    best_path = _save(model, optimizer, config, epoch, step, checkpoint_dir, name="best.pt")
            if done:
                break
    except Exception as exc:
        if repository is not None and run_id is not None:
            repository.fail_run(run_id, f"{type(exc).__name__}: {exc}")
        raise

    if last_path is None:
        last_path = _save(model, optimizer, config, epoch, step, checkpoint_dir)
    if repository is not None:
        repository.finish_run(run_id, str(last_path))
    return TrainResult(last_path, loss_log, run_id, best_path, best_val)


def _save(
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    epoch: int,
    step: int,
    directory: Path,
    name: Optional[str] = None,
) -> Path:
    checkpoint = Checkpoint(
        epoch=epoch,
        step=step,
        model_state={k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        optimizer_state=optimizer.state_dict(),
        config=config.model_dump(mode="json"),
        rng_state=capture_rng_state(),
    )
    path = checkpoint.save(directory / (name or f"epoch_{epoch:03d}.pt"))
    if name is None:
        shutil.copyfile(path, directory / "last.pt")
    logger.debug("Saved checkpoint %s", path)
    return path


def save_model_checkpoint(model: DRRNet, config: TrainConfig, path: Union[str, Path], epoch: int = 0) -> Path:
    """Checkpoint holding only parameters and config, e.g. for exporting a trained model."""
    return Checkpoint(
        epoch=epoch,
        step=0,
        model_state=model.state_dict(),
        optimizer_state=None,
        config=config.model_dump(mode="json"),
    ).save(path)


@torch.no_grad()
def infer(
    checkpoint: Union[str, Path],
    input_dir: Union[str, Path],
    output_dir: Union[str, Path],
    level: int = 0,
    input_size: Optional[int] = None,
    device: Union[str, torch.device] = "cpu",
) -> list[Path]:
    """Export sigmoid(O_level) for every image as 8-bit PNG at the original resolution."""
    if not 0 <= level <= 4:
        raise ValueError(f"level must be in 0..4, got {level}")
    stored = Checkpoint.load(checkpoint)
    config = stored.train_config()
    size = input_size or config.input_size
    model = load_model(stored, device).eval()

    input_dir, output_dir = Path(input_dir), Path(output_dir)
    if not input_dir.is_dir():
        raise UnreadableImage(f"not a directory: {input_dir}")
    output_dir.mkdir(parents=True, exist_ok=True)
    images = sorted(p for p in input_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)

    written = []
    for path in images:
        image = read_image(path)
        h, w = image.shape[:2]
        pair = SamplePair(path.stem, image, np.zeros((h, w), dtype=np.uint8), (h, w))
        tensor, _ = to_tensors(resize_pair(pair, size))
        predictions = model(tensor.unsqueeze(0).to(device))
        prob = predictions.probabilities(level, size=(h, w))[0, 0]
        pixels = torch.round(prob * 255).clamp(0, 255).to(torch.uint8).cpu().numpy()
        out = output_dir / f"{path.stem}.png"
        Image.fromarray(pixels).save(out)
        written.append(out)
    logger.info("Exported %d level-%d maps to %s", len(written), level, output_dir)
    return written


def evaluate(
    pred_dir: Union[str, Path],
    gt_dir: Union[str, Path],
    out_csv: Optional[Union[str, Path]] = None,
    repository: Optional[RunRepository] = None,
    workers: int = 1,
) -> EvalRecord:
    """Score a prediction directory against GT masks and write the CSV report."""
    record = evaluate_dataset(pred_dir, gt_dir, workers=workers)
    if out_csv is not None:
        write_csv(record, out_csv)
    if repository is not None:
        repository.add_eval_record(record, str(pred_dir), str(gt_dir))
    return record


def count_macs(model: nn.Module, input_size: int) -> int:
    """Multiply-accumulates of one forward pass at input_size x input_size."""
    total = 0

    def conv_hook(module: nn.Conv2d, inputs: Any, output: torch.Tensor) -> None:
        nonlocal total
        kh, kw = module.kernel_size
        total += output.numel() * (module.in_channels // module.groups) * kh * kw

    def linear_hook(module: nn.Linear, inputs: Any, output: torch.Tensor) -> None:
        nonlocal total
        total += output.numel() * module.in_features

    def attention_hook(module: Attention, inputs: Any, output: torch.Tensor) -> None:
        nonlocal total
        x, h, w = inputs
        b, n, c = x.shape
        # q @ k^T and attn @ v over all heads
        total += 2 * b * n * module.reduced_tokens(h, w) * c

    handles = []
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            handles.append(module.register_forward_hook(conv_hook))
        elif isinstance(module, nn.Linear):
            handles.append(module.register_forward_hook(linear_hook))
        elif isinstance(module, Attention):
            handles.append(module.register_forward_hook(attention_hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, 3, input_size, input_size))
    finally:
        for handle in handles:
            handle.remove()
        model.train(was_training)
    return total


def report_complexity(config: ModelConfig, input_size: Optional[int] = None) -> ComplexityReport:
    """Exact parameter count and FLOPs (2 x MACs) of the configured model."""
    size = input_size or getattr(config, "input_size", 384)
    model = build_model(config, load_pretrained=False)
    macs = count_macs(model, size)
    return ComplexityReport(params=count_parameters(model), macs=macs, flops=2 * macs, input_size=size)
