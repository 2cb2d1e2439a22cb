"""Optimizer, single training step, plateau schedule and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import loss as losses
from ..metrics import dsc
from ..model import Network, forward, save_checkpoint
from ..tensor import NonFiniteError, Tensor, backward
from .data import sample_patches
from .infer import sliding_window_infer

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "lr", "margin", "ce", "recon", "total", "val_dsc")


@dataclass
class TrainConfig:
    patch_size: tuple[int, int, int] = (32, 32, 32)
    learning_rate: float = 1e-4
    weight_decay: float = 2e-6
    lr_decay_factor: float = 0.1
    plateau_patience: int = 50_000
    early_stop_patience: int = 25_000
    improvement_threshold: float = 1e-4
    val_every: int = 100
    max_iterations: int = 1000
    batch_size: int = 1
    fg_bias: float = 0.9
    seed: int = 0

    def __post_init__(self):
        self.patch_size = tuple(int(v) for v in self.patch_size)
        if len(self.patch_size) != 3 or any(n <= 0 or n % 8 for n in self.patch_size):
            raise ValueError(f"patch extents {self.patch_size} must be positive multiples of 8")
        positive = ("learning_rate", "lr_decay_factor", "plateau_patience",
                    "early_stop_patience", "val_every", "max_iterations", "batch_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or not 0 <= self.fg_bias <= 1:
            raise ValueError("weight_decay must be >= 0 and fg_bias in [0, 1]")


class TrainingError(RuntimeError):
    pass


class Adam:
    """Adam with decoupled weight decay (AdamW)."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float, weight_decay: float = 0.0) -> None:
        self.step_count += 1
        b1, b2, t = self.beta1, self.beta2, self.step_count
        c1, c2 = 1 - b1**t, 1 - b2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + weight_decay * p.data
            p.data = (p.data - np.asarray(lr, dtype=p.dtype) * update).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _stack(batch):
    images = np.stack([np.asarray(img, dtype=np.float32) for img, _ in batch])
    labels = np.stack([np.asarray(lab) for _, lab in batch]).astype(np.int64)
    if images.ndim == 4:
        images = images[..., None]
    return images, labels


def compute_losses(net: Network, images: np.ndarray, labels: np.ndarray):
    """Forward pass and the three loss tensors for a batch."""
    cfg = net.config
    x = Tensor(images.astype(net.dtype))
    out = forward(net, x)
    coarse = out["caps_len"] if "caps_len" in out else out["coarse"]
    target = losses.downsample_labels(labels, 8, cfg.classes)
    margin = losses.margin_loss(coarse, target)
    weights = losses.class_weights(labels, cfg.classes)
    ce = losses.weighted_ce(out["seg"], labels, weights)
    recon = losses.masked_mse(out["recon"], images.astype(net.dtype), labels)
    return out, margin, ce, recon


def train_step(net: Network, batch, optimizer: Adam, lr: float,
               weight_decay: float = 0.0) -> losses.LossReport:
    """forward, weighted total loss, backward, AdamW update, zero gradients."""
    cfg = net.config
    images, labels = _stack(batch)
    if any(n % 8 for n in images.shape[1:4]):
        raise ValueError(f"patch extents {images.shape[1:4]} must be divisible by 8")
    weights = (cfg.margin_weight, cfg.ce_weight, cfg.reconstruction_weight)
    optimizer.zero_grad()
    try:
        _, margin, ce, recon = compute_losses(net, images, labels)
        total = losses.total_loss(margin, ce, recon, weights)
        backward(total)
    except NonFiniteError as exc:
        raise TrainingError(f"training aborted: {exc}") from exc
    for name, p in net.named_parameters().items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"training aborted: non-finite gradient in {name}")
    optimizer.step(lr, weight_decay)
    optimizer.zero_grad()
    return losses.total_loss(margin.item(), ce.item(), recon.item(), weights)


@dataclass(frozen=True)
class ScheduleState:
    lr: float
    best_dsc: float = -np.inf
    best_iteration: int = 0
    last_decay: int = 0
    stop: bool = False
    improved: bool = False


def schedule_update(state: ScheduleState, val_dsc: float, iteration: int,
                    cfg: TrainConfig) -> ScheduleState:
    """Plateau learning-rate decay and early stopping on validation Dice.

    Pure: the new state depends only on the arguments.
    """
    if val_dsc > state.best_dsc + cfg.improvement_threshold:
        return dataclasses.replace(state, best_dsc=val_dsc, best_iteration=iteration,
                                   stop=False, improved=True)
    lr, last_decay = state.lr, state.last_decay
    if iteration - max(state.best_iteration, state.last_decay) >= cfg.plateau_patience:
        lr, last_decay = lr * cfg.lr_decay_factor, iteration
    stop = iteration - state.best_iteration >= cfg.early_stop_patience
    return dataclasses.replace(state, lr=lr, last_decay=last_decay, stop=stop, improved=False)


def mean_foreground_dsc(truth: np.ndarray, pred: np.ndarray, classes: int) -> float:
    return float(np.mean([dsc(truth, pred, c) for c in range(1, classes)]))


@dataclass
class TrainResult:
    iterations: int
    best_dsc: float
    history: list = field(default_factory=list)


def fit(net: Network, train_set, val_set, cfg: TrainConfig, log_path=None,
        checkpoint_path=None, stop_at_dsc: float | None = None) -> TrainResult:
    """Train on random patches of ``train_set`` [(image, labels), ...].

    Validates every ``cfg.val_every`` iterations with sliding-window inference
    on ``val_set``; the checkpoint is rewritten whenever validation improves.
    One CSV row per iteration goes to ``log_path``.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.parameters())
    state = ScheduleState(cfg.learning_rate)
    history = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        fh.write(f"# architecture: {net.architecture}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    try:
        it = 0
        for it in range(1, cfg.max_iterations + 1):
            batch = []
            for _ in range(cfg.batch_size):
                img, lab = train_set[int(rng.integers(len(train_set)))]
                batch += sample_patches(img, lab, cfg.patch_size, 1, cfg.fg_bias,
                                        seed=int(rng.integers(2**31)))
            rep = train_step(net, batch, opt, state.lr, cfg.weight_decay)
            val = None
            if it % cfg.val_every == 0 or it == cfg.max_iterations:
                scores = [mean_foreground_dsc(lab, sliding_window_infer(net, img, cfg.patch_size),
                                              net.config.classes)
                          for img, lab in val_set]
                val = float(np.mean(scores))
                state = schedule_update(state, val, it, cfg)
                if state.improved and checkpoint_path is not None:
                    save_checkpoint(net, checkpoint_path)
                log.info("iter %d total %.5f val_dsc %.4f lr %.2e", it, rep.total, val, state.lr)
            row = (it, state.lr, rep.margin, rep.ce, rep.recon, rep.total, val)
            history.append(row)
            if writer is not None:
                writer.writerow([it, repr(state.lr), repr(rep.margin), repr(rep.ce),
                                 repr(rep.recon), repr(rep.total),
                                 "" if val is None else repr(val)])
            if state.stop or (stop_at_dsc is not None and val is not None and val > stop_at_dsc):
                break
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path is not None and not Path(checkpoint_path).exists():
        save_checkpoint(net, checkpoint_path)
    return TrainResult(it, float(state.best_dsc), history)
