"""Dense linear algebra, losses, the momentum optimizer and rank-one inverse updates.

Matrices are plain ``float64`` numpy arrays. Every public function here is pure:
inputs are never modified in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateUpdateError, ShapeError

DTYPE = np.float64


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Seeded PCG64 generator; equal seeds give equal streams on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    if z.size == 0:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    if z.size == 0:
        raise ShapeError("log_softmax of an empty vector")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def smoothed_targets(labels, n_classes: int, epsilon: float) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels))
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"label out of range for {n_classes} classes")
    t = np.full((labels.size, n_classes), epsilon / n_classes, dtype=DTYPE)
    t[np.arange(labels.size), labels] += 1.0 - epsilon
    return t


def label_smoothed_ce(logits, y: int, epsilon: float = 0.0) -> float:
    """Cross entropy against the target ``(1 - eps) * onehot(y) + eps / L``."""
    z = np.asarray(logits, dtype=DTYPE)
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    n = z.shape[-1] if z.ndim else 0
    if not 0 <= y < n:
        raise IndexError(f"label {y} out of range for {n} classes")
    target = smoothed_targets([y], n, epsilon)[0]
    return float(-(target * log_softmax(z)).sum())


def batch_label_smoothed_ce(logits: np.ndarray, labels, epsilon: float = 0.0):
    """Mean smoothed CE over a batch, plus its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=DTYPE)
    b, n = logits.shape
    target = smoothed_targets(labels, n, epsilon)
    logp = log_softmax(logits)
    loss = float(-(target * logp).sum() / b)
    dlogits = (np.exp(logp) - target) / b
    return loss, dlogits


@dataclass
class OptimState:
    """SGD state. Weight decay is coupled: it enters the momentum buffer."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_momentum_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                      state: OptimState) -> tuple[dict[str, np.ndarray], OptimState]:
    """One step of ``v <- mu*v + (g + wd*p); p <- p - lr*v`` for every key in ``grads``.

    Parameters without a gradient entry are passed through untouched.
    """
    new_params = dict(params)
    velocity = dict(state.velocity)
    for name, g in grads.items():
        p = np.asarray(params[name], dtype=DTYPE)
        g = np.asarray(g, dtype=DTYPE)
        if p.shape != g.shape:
            raise ShapeError(f"{name}: param {p.shape} vs grad {g.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeError(f"{name}: velocity {v.shape} vs param {p.shape}")
        v = state.momentum * v + (g + state.weight_decay * p)
        velocity[name] = v
        new_params[name] = p - state.lr * v
    return new_params, OptimState(state.lr, state.momentum, state.weight_decay, velocity)


def sherman_morrison_update(inv: np.ndarray, v) -> np.ndarray:
    """Inverse of ``A + v v^T`` given ``inv = A^-1`` (symmetric)."""
    inv = np.asarray(inv, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    if inv.ndim != 2 or inv.shape[0] != inv.shape[1] or v.shape != (inv.shape[0],):
        raise ShapeError(f"inverse {inv.shape} incompatible with vector {v.shape}")
    u = inv @ v
    denom = 1.0 + v @ u
    if denom <= 1e-12:
        raise DegenerateUpdateError(f"rank-one update denominator {denom:.3e}")
    out = inv - np.outer(u, u) / denom
    # keep exact symmetry so the error never accumulates over long streams
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class StepDecay:
    milestones: tuple[int, ...] = (150, 225)
    factor: float = 0.1


def lr_schedule(epoch: int, initial_lr: float = 0.01, config: StepDecay | None = None) -> float:
    """Step decay: multiply by ``factor`` once for every milestone already reached."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    config = config or StepDecay()
    passed = sum(1 for m in config.milestones if epoch >= m)
    return initial_lr * config.factor ** passed
