"""Mini-batch training with validation-based early stopping."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import Checkpoint
from .data import DataError, Manifest, load_sample
from .masks import FLIP_MODES, Sample, flip_augment
from .model import Model, ModelConfig, build_model, joint_loss, multitask_forward
from .optim import Optimizer, make_config
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

PIXEL_MEAN = 0.5
PIXEL_SCALE = 0.25


@dataclass
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 5
    lam: Optional[float] = None  # None: use the model config's lambda
    optimizer: str = "nadam"
    lr: float = 2e-4
    val_fraction: float = 0.1
    seed: int = 0
    augment: bool = True
    boundary_dilate: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list = field(default_factory=list)
    stopped_early: bool = False


def to_input(images: np.ndarray) -> Tensor:
    """(n, h, w, 3) uint8 -> normalized float32 (n, 3, h, w) tensor."""
    x = np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2) / 255.0
    return Tensor(np.ascontiguousarray((x - PIXEL_MEAN) / PIXEL_SCALE))


def _stack(samples: list) -> tuple[Tensor, np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    y = np.stack([s.seg for s in samples])[:, None].astype(np.float32)
    b = np.stack([s.boundary for s in samples])[:, None].astype(np.float32)
    return to_input(images), y, b


def evaluate_loss(model: Model, samples: list, lam: float, batch_size: int = 8) -> float:
    """Mean per-image joint loss in eval mode."""
    if not samples:
        return float("nan")
    was_training = model.training
    model.eval()
    total = 0.0
    with no_grad():
        for i in range(0, len(samples), batch_size):
            x, y, b = _stack(samples[i:i + batch_size])
            seg, bnd = multitask_forward(model, x)
            total += joint_loss(seg, bnd, y, b, lam).item()
    model.training = was_training
    return total / len(samples)


def split_validation(samples: list, fraction: float, seed: int) -> tuple[list, list]:
    rng = np.random.default_rng([seed, 1])
    n_val = max(1, int(round(len(samples) * fraction)))
    if n_val >= len(samples):
        raise DataError("training split too small to carve out a validation set")
    perm = rng.permutation(len(samples))
    val_idx = set(perm[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


def train(
    train_samples: list,
    model_config: ModelConfig,
    cfg: TrainConfig,
    val_samples: Optional[list] = None,
    log_path=None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train a fresh model; returns the best-validation checkpoint.

    Without explicit ``val_samples`` a seeded ``val_fraction`` of the training
    samples is held out.
    """
    cfg.validate()
    if not train_samples:
        raise DataError("empty training split")
    if not val_samples:
        train_samples, val_samples = split_validation(train_samples, cfg.val_fraction, cfg.seed)
    lam = model_config.lam if cfg.lam is None else cfg.lam
    model = build_model(model_config)
    opt = Optimizer(model.params, cfg.optimizer, make_config(cfg.optimizer, cfg.lr))
    rng = np.random.default_rng([cfg.seed, 0])

    history: list[dict] = []
    val_history: list[float] = []
    best = (float("inf"), None, None, 0)  # loss, model state, optimizer arrays, epoch
    since_best = 0
    stopped = False
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            model.train()
            order = rng.permutation(len(train_samples))
            flips = rng.integers(0, len(FLIP_MODES), size=len(train_samples))
            total = 0.0
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                batch = [
                    flip_augment(train_samples[j], FLIP_MODES[flips[j]]) if cfg.augment else train_samples[j]
                    for j in idx
                ]
                x, y, b = _stack(batch)
                seg, bnd = multitask_forward(model, x)
                loss = joint_loss(seg, bnd, y, b, lam)
                model.zero_grad()
                backward(loss)
                opt.step()
                total += loss.item()
            train_loss = total / len(train_samples)
            val_loss = evaluate_loss(model, val_samples, lam, cfg.batch_size)
            val_history.append(val_loss)
            entry = {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "lr": cfg.lr,
                "wall_ms": int(round((time.perf_counter() - t0) * 1000)),
            }
            history.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
            if on_epoch:
                on_epoch(entry)
            log.info("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)

            if val_loss < best[0]:
                opt_copy = {k: v.copy() for k, v in opt.state_arrays().items()}
                best = (val_loss, model.copy_state(), (opt_copy, opt.meta()), epoch)
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    stopped = epoch < cfg.max_epochs
                    break
    finally:
        if log_file:
            log_file.close()

    _, state, (opt_arrays, opt_meta), best_epoch = best
    model.load_state_arrays(state)
    model.eval()
    ckpt = Checkpoint(
        model=model,
        optimizer_meta=opt_meta,
        optimizer_arrays=opt_arrays,
        epoch=best_epoch,
        val_history=val_history,
        extra={"train_config": asdict(cfg)},
    )
    return TrainResult(ckpt, history, stopped)


def load_split(manifest: Manifest, split: str, boundary_dilate: int = 0) -> list:
    return [load_sample(manifest, r, boundary_dilate) for r in manifest.split(split)]


def train_from_manifest(manifest: Manifest, model_config: ModelConfig, cfg: TrainConfig, log_path=None, on_epoch=None) -> TrainResult:
    train_samples = load_split(manifest, "train", cfg.boundary_dilate)
    val_samples = load_split(manifest, "val", cfg.boundary_dilate)
    return train(train_samples, model_config, cfg, val_samples or None, log_path=log_path, on_epoch=on_epoch)
