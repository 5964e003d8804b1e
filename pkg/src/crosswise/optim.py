"""AdamW with decoupled weight decay, global-norm clipping, plateau LR halving."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams


@dataclass
class AdamWConfig:
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: ModelParams) -> "AdamWState":
        return cls(step=0,
                   m={n: np.zeros_like(t) for n, t in params.named_tensors()},
                   v={n: np.zeros_like(t) for n, t in params.named_tensors()})


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 1.0
                   ) -> dict[str, np.ndarray]:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds it."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads


def adamw_step(params: ModelParams, grads: dict[str, np.ndarray],
               state: AdamWState, cfg: AdamWConfig) -> tuple[ModelParams, AdamWState]:
    """One update: decoupled decay first, then bias-corrected Adam moments.

    Mutates params/state in place and returns them. Non-finite gradients are
    a hard error rather than something to silently step through.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, theta in params.named_tensors():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if cfg.weight_decay:
            theta *= 1.0 - cfg.lr * cfg.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        theta -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return params, state


class PlateauScheduler:
    """Halve the LR after two consecutive epochs without val-loss improvement.

    An epoch counts as improved when it beats the best seen loss by more than
    the threshold. After a halving the counter resets; the LR never drops
    below the floor.
    """

    def __init__(self, lr: float = 2.5e-4, factor: float = 0.5, patience: int = 2,
                 threshold: float = 1e-4, floor: float = 1e-6):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.floor = floor
        self.best = math.inf
        self.stale_epochs = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.stale_epochs = 0
        else:
            self.stale_epochs += 1
            if self.stale_epochs >= self.patience:
                self.lr = max(self.floor, self.lr * self.factor)
                self.stale_epochs = 0
        return self.lr
