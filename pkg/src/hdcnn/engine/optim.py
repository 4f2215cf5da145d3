"""SGD with momentum, weight decay and a step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hdcnn.errors import InvalidInputError, TrainingDivergedError


@dataclass
class OptimizerState:
    initial_lr: float
    drop_factor: float = 10.0
    drop_every: int | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iteration: int = 0
    buffers: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.initial_lr < 0:
            raise InvalidInputError("learning rate must be non-negative")
        if self.drop_every is not None and self.drop_every <= 0:
            raise InvalidInputError("drop_every must be positive")

    def lr_at(self, iteration: int) -> float:
        if not self.drop_every:
            return self.initial_lr
        return self.initial_lr / self.drop_factor ** (iteration // self.drop_every)

    @property
    def lr(self) -> float:
        return self.lr_at(self.iteration)


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState) -> None:
    """In-place update: v <- mu*v - lr*(g + wd*w); w <- w + v."""
    if len(params) != len(grads):
        raise InvalidInputError("params and grads differ in length")
    for w, g in zip(params, grads):
        if w.shape != g.shape:
            raise InvalidInputError(f"gradient shape {g.shape} != parameter shape {w.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("non-finite gradient", state.iteration)
    if not state.buffers:
        state.buffers = [np.zeros_like(w) for w in params]
    lr = state.lr
    for w, g, v in zip(params, grads, state.buffers):
        v *= state.momentum
        v -= lr * (g + state.weight_decay * w)
        w += v
    state.iteration += 1
