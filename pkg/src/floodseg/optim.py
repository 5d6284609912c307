"""SGD with classical momentum, L2 weight decay and a step learning-rate schedule."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class OptimConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.0005
    momentum: float = 0.9
    epochs: int = 20
    lr_drop_every: int = 5
    lr_drop_factor: float = 10.0
    batch_size: int = 16

    def __post_init__(self):
        if self.learning_rate <= 0 or self.lr_drop_factor <= 0:
            raise ConfigError("learning_rate and lr_drop_factor must be positive")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("weight_decay must be >= 0 and momentum in [0, 1)")
        if self.epochs < 1 or self.lr_drop_every < 1 or self.batch_size < 1:
            raise ConfigError("epochs, lr_drop_every and batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict | None) -> "OptimConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown optimizer fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimState:
    velocity: list[np.ndarray] = field(default_factory=list)
    epoch: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "OptimState":
        return cls([np.zeros_like(p) for p in params])


def lr_at(epoch: int, cfg: OptimConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.learning_rate / cfg.lr_drop_factor ** (epoch // cfg.lr_drop_every)


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimState, lr: float,
             cfg: OptimConfig) -> None:
    """In place: ``v <- m*v - lr*(g + wd*w)``, then ``w <- w + v``."""
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(state.velocity)):
        raise ShapeError("params, grads and velocity lists differ in length")
    for w, g, v in zip(params, grads, state.velocity):
        if w.shape != g.shape or w.shape != v.shape:
            raise ShapeError(f"shape mismatch: param {w.shape}, grad {g.shape}, velocity {v.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    for w, g, v in zip(params, grads, state.velocity):
        v *= cfg.momentum
        v -= lr * (g + cfg.weight_decay * w)
        w += v
