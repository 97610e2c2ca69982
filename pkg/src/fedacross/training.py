"""Mini-batch SGD loop shared by server pre-training and client adaptation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import augment_batch
from .errors import DivergenceError
from .model import ModelParams, model_backward
from .numerics import OptimState, StepDecay, lr_schedule, sgd_momentum_step


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-3
    label_smoothing: float = 0.1
    milestones: tuple[float, ...] = (0.5, 0.75)  # fractions of ``epochs``
    decay: float = 0.1
    augment: bool = True
    patience: int | None = None  # early stopping on epoch loss; off by default

    def schedule(self) -> StepDecay:
        return StepDecay(tuple(int(f * self.epochs) for f in self.milestones), self.decay)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    cuts = list(range(0, n, size))
    out = [order[c:c + size] for c in cuts]
    # batch-norm needs at least two rows per batch
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def train(params: ModelParams, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
          rng: np.random.Generator, history: list | None = None) -> ModelParams:
    """Train the unfrozen groups of a copy of ``params``; returns the copy.

    ``history`` receives the mean training loss of every epoch.
    """
    params = params.copy()
    n = len(labels)
    if cfg.epochs == 0 or n < 2:
        return params
    flat_dim = int(np.prod(images.shape[1:]))
    state = OptimState(cfg.lr, cfg.momentum, cfg.weight_decay)
    schedule = cfg.schedule()
    best, stale = math.inf, 0
    for epoch in range(cfg.epochs):
        state.lr = lr_schedule(epoch, cfg.lr, schedule)
        total = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            x = augment_batch(images[idx], rng) if cfg.augment else images[idx]
            loss, grads = model_backward(params, x.reshape(len(idx), flat_dim), labels[idx],
                                         cfg.label_smoothing, update_running=True)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            arrays = params.arrays()
            updated, state = sgd_momentum_step({k: arrays[k] for k in grads}, grads, state)
            params = _assign(params, updated)
            total += loss * len(idx)
        epoch_loss = total / n
        if history is not None:
            history.append(epoch_loss)
        if cfg.patience is not None:
            if epoch_loss < best - 1e-6:
                best, stale = epoch_loss, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    return params


def _assign(params: ModelParams, updated: dict) -> ModelParams:
    # in-place assignment; ``train`` already works on a private copy
    for name, value in updated.items():
        group, *rest = name.split(".")
        if group == "phi":
            setattr(params.phi.layers[int(rest[0])], rest[1], value)
        elif group == "psi":
            setattr(params.psi, rest[0], value)
        else:
            setattr(params.nu, rest[0], value)
    return params
