"""Desk-scale training: MSE on complex channels, Adam, one-cycle schedule."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import grad as G
from .model import Model, save_params

log = logging.getLogger(__name__)

WARMUP_FRACTION = 0.3
START_DIV = 25.0
FINAL_DIV = 1e4


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 1
    peak_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.05
    # hard cap on optimiser steps; None means epochs * batches per epoch
    max_steps: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0 < self.val_fraction < 1:
            raise ValueError("validation fraction must lie in (0, 1)")
        if self.peak_lr < 0:
            raise ValueError("peak learning rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")


def mse_loss(pred, target) -> G.Tensor:
    return G.mse_loss(pred, target)


def one_cycle_lr(step: int, total_steps: int, peak_lr: float) -> float:
    """Linear warm-up from peak/25 over the first 30% of steps, cosine decay to peak/1e4."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if total_steps == 1:
        return peak_lr
    start, floor = peak_lr / START_DIV, peak_lr / FINAL_DIV
    top = max(1, round(WARMUP_FRACTION * total_steps))
    if step <= top:
        return peak_lr - (peak_lr - start) * (top - step) / top
    span = total_steps - 1 - top
    return floor + (peak_lr - floor) * 0.5 * (1 + math.cos(math.pi * (step - top) / span))


class Adam:
    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def adam_step(params, grads, state: Adam, lr: float) -> None:
    state.step(params, grads, lr)


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    best_val: float = math.inf
    best_params: dict[str, np.ndarray] | None = None
    step: int = 0
    step_losses: list[float] = field(default_factory=list)


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise ValueError("need at least two samples to hold out a validation split")
    order = np.random.default_rng(seed).permutation(n)
    n_val = min(n - 1, max(1, round(val_fraction * n)))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _batch(dataset, idx):
    xs, ys = zip(*(dataset[i] for i in idx))
    return np.concatenate(xs), np.concatenate(ys)


def evaluate(model: Model, dataset, idx) -> float:
    with G.no_grad():
        losses = [float(mse_loss(model.forward(dataset[i][0]), dataset[i][1]).data) for i in idx]
    return float(np.mean(losses))


def train(model: Model, dataset: Sequence, cfg: TrainConfig, checkpoint: str | Path | None = None,
          log_csv: str | Path | None = None, start_step: int = 0) -> TrainResult:
    """Train in place; returns the loss log and the best-validation parameters.

    ``start_step`` resumes the global step counter (and so the LR schedule).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    train_idx, val_idx = split_indices(len(dataset), cfg.val_fraction, cfg.seed)
    per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(cfg.betas, cfg.eps)
    res = TrainResult(step=start_step)
    step = start_step
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        if step >= total:
            break
        if (epoch + 1) * per_epoch <= start_step:
            continue
        losses, lr = [], 0.0
        for b in range(per_epoch):
            if epoch * per_epoch + b < start_step:
                continue
            if step >= total:
                break
            x, y = _batch(dataset, order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            lr = one_cycle_lr(step, total, cfg.peak_lr)
            loss = mse_loss(model.forward(x, training=True, rng=drop_rng), y)
            grads = G.backward(loss)
            if lr > 0:
                opt.step(model.params, grads, lr)
            losses.append(float(loss.data))
            step += 1
        res.step_losses.extend(losses)
        val = evaluate(model, dataset, val_idx)
        res.log.append({"epoch": epoch, "split": "train", "loss": float(np.mean(losses)), "lr": lr})
        res.log.append({"epoch": epoch, "split": "val", "loss": val, "lr": lr})
        log.info("epoch %d step %d train %.5g val %.5g lr %.3g", epoch, step, np.mean(losses), val, lr)
        if val < res.best_val:
            res.best_val = val
            res.best_params = model.params.arrays()
            if checkpoint is not None:
                save_params(model, checkpoint, {"step": step, "epoch": epoch, "val_loss": val})
    res.step = step
    if log_csv is not None:
        write_loss_csv(log_csv, res.log)
    return res


def write_loss_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "split", "loss", "lr"])
        w.writeheader()
        w.writerows(rows)
