"""Training loop: momentum SGD with weight decay on convolution weights
only, a per-iteration polynomial learning-rate schedule over the full run,
CSV iteration logs, rolling/best/final checkpoints, and checkpoint
evaluation that writes quantized prediction maps.

Reproducibility contract: single-threaded runs with equal seeds produce
byte-identical logs.  Sample shuffling uses a per-epoch stream derived from
the seed; augmentation streams derive from (seed, sample id, epoch).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import AugmentationConfig, augment, sample_rng, to_batch
from .errors import ConfigError, NonFiniteLossError
from .losses import total_loss
from .metrics import MetricConfig, MetricReport, evaluate_pairs
from .net import MINet, load_checkpoint, save_checkpoint

LOG_COLUMNS = ("iteration", "epoch", "lr", "bcel", "cel", "total")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr0: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    lambda_cel: float = 1.0
    seed: int = 0
    iterations: int = 0  # > 0 overrides epochs as the total step budget
    grad_clip: float = 0.0  # > 0 enables gradient-norm clipping
    checkpoint_every: int = 1  # epochs between numbered checkpoints; 0 disables

    def __post_init__(self):
        for name in ("epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr0", "momentum", "poly_power"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0 or self.lambda_cel < 0:
            raise ConfigError("weight_decay and lambda_cel must be >= 0")


@dataclass
class TrainState:
    epoch: int = 0
    global_iteration: int = 0
    current_lr: float = 0.0
    best_validation_f_avg: float = 0.0
    rng: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    state: TrainState
    log_rows: list
    checkpoints: dict
    model: MINet
    validation: MetricReport = None


def poly_lr(t: int, total: int, lr0: float = 1e-3, power: float = 0.9) -> float:
    """Polynomial decay lr0 * (1 - t/total)**power over t in [0, total]."""
    if total <= 0:
        raise ValueError(f"total iterations must be positive, got {total}")
    if t < 0 or t > total:
        raise ValueError(f"iteration {t} outside [0, {total}]")
    return lr0 * (1.0 - t / total) ** power


def split_weight_decay_params(model):
    """Weight decay applies to multi-dimensional weights only (convolutions);
    biases and normalization affine parameters are excluded."""
    decay, no_decay = [], []
    for param in model.parameters():
        (decay if param.ndim >= 2 else no_decay).append(param)
    return decay, no_decay


def build_optimizer(model, cfg: TrainConfig):
    decay, no_decay = split_weight_decay_params(model)
    return torch.optim.SGD(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.lr0,
        momentum=cfg.momentum,
    )


def _batch_hash(images: torch.Tensor) -> str:
    return hashlib.sha1(images.detach().cpu().numpy().tobytes()).hexdigest()[:12]


def train(
    model: MINet,
    dataset,
    cfg: TrainConfig,
    out_dir=None,
    augmentation: AugmentationConfig = None,
    validation_dataset=None,
    metric_cfg: MetricConfig = MetricConfig(),
    validate: bool = True,
):
    """Run the configured schedule; returns state, logs and checkpoint paths.

    ``validation_dataset`` defaults to the training set (the desk-scale
    overfit protocol); the best checkpoint tracks its adaptive F value.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = cfg.iterations if cfg.iterations > 0 else cfg.epochs * steps_per_epoch
    validation = validation_dataset if validation_dataset is not None else dataset

    torch.manual_seed(cfg.seed)
    shuffler = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD5]))
    optimizer = build_optimizer(model, cfg)
    state = TrainState(rng={"seed": cfg.seed})
    log_rows = []
    checkpoints = {}
    last_report = None

    t = 0
    epoch = 0
    model.train()
    while t < total:
        order = shuffler.permutation(len(dataset))
        for start in range(0, len(dataset), cfg.batch_size):
            if t >= total:
                break
            picked = [dataset[int(i)] for i in order[start : start + cfg.batch_size]]
            if augmentation is not None:
                picked = [
                    augment(pair, augmentation, sample_rng(cfg.seed, pair.id, epoch))
                    for pair in picked
                ]
            images, masks = to_batch(picked)

            lr = poly_lr(t, total, cfg.lr0, cfg.poly_power)
            for group in optimizer.param_groups:
                group["lr"] = lr

            prediction = model(images)
            breakdown = total_loss(prediction, masks, lam=cfg.lambda_cel)
            if not torch.isfinite(breakdown.total):
                raise NonFiniteLossError(
                    f"non-finite loss at iteration {t}",
                    diagnostics={
                        "iteration": t,
                        "lr": lr,
                        "bcel": breakdown.bcel.item(),
                        "cel": breakdown.cel.item(),
                        "inputs_hash": _batch_hash(images),
                    },
                )
            optimizer.zero_grad()
            breakdown.total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()

            log_rows.append(
                {
                    "iteration": t,
                    "epoch": epoch,
                    "lr": lr,
                    "bcel": breakdown.bcel.item(),
                    "cel": breakdown.cel.item(),
                    "total": breakdown.total.item(),
                }
            )
            t += 1
            state.global_iteration = t
            state.current_lr = poly_lr(t, total, cfg.lr0, cfg.poly_power)

        epoch += 1
        state.epoch = epoch
        if validate:
            last_report = _validation_report(model, validation, metric_cfg)
            improved = last_report.f_avg >= state.best_validation_f_avg
            if improved:
                state.best_validation_f_avg = last_report.f_avg
            if out_dir is not None and improved:
                save_checkpoint(out_dir / "best.ckpt", model, state.to_dict())
                checkpoints["best"] = out_dir / "best.ckpt"
        if out_dir is not None:
            save_checkpoint(out_dir / "last.ckpt", model, state.to_dict())
            checkpoints["last"] = out_dir / "last.ckpt"
            if cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0:
                path = out_dir / f"epoch{epoch:04d}.ckpt"
                save_checkpoint(path, model, state.to_dict())
                checkpoints[f"epoch{epoch:04d}"] = path

    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", model, state.to_dict())
        checkpoints["final"] = out_dir / "final.ckpt"
        write_log_csv(out_dir / "log.csv", log_rows)
    return TrainResult(
        state=state,
        log_rows=log_rows,
        checkpoints=checkpoints,
        model=model,
        validation=last_report,
    )


def write_log_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow(
                [row["iteration"], row["epoch"]] + [repr(row[c]) for c in LOG_COLUMNS[2:]]
            )


def predict_dataset(model: MINet, dataset, batch_size: int = 4):
    """Quantized (8-bit) eval-mode predictions, matching what gets written to disk."""
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
            images, _ = to_batch(batch)
            p = model(images).squeeze(1).cpu().numpy()
            quantized = np.rint(np.clip(p, 0.0, 1.0) * 255.0) / 255.0
            preds.extend(quantized)
    model.train()
    return preds


def _validation_report(model, dataset, metric_cfg) -> MetricReport:
    preds = predict_dataset(model, dataset)
    gts = [pair.mask for pair in dataset]
    return evaluate_pairs(preds, gts, metric_cfg, ids=[pair.id for pair in dataset])


def evaluate_checkpoint(
    checkpoint,
    dataset,
    metric_cfg: MetricConfig = MetricConfig(),
    out_dir=None,
    expected_config=None,
) -> MetricReport:
    """Load a checkpoint, predict the dataset, optionally write PNG maps,
    and return the metric report computed on the quantized predictions."""
    if isinstance(checkpoint, MINet):
        model = checkpoint
    else:
        model, _ = load_checkpoint(checkpoint, expected_config=expected_config)
    preds = predict_dataset(model, dataset)
    model.eval()
    if out_dir is not None:
        from .imgio import save_gray_png

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for pair, pred in zip(dataset, preds):
            save_gray_png(out_dir / f"{pair.id}.png", pred)
    gts = [pair.mask for pair in dataset]
    return evaluate_pairs(preds, gts, metric_cfg, ids=[pair.id for pair in dataset])
