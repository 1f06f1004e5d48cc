"""SGD with momentum and cosine annealing schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

__all__ = ["CosineSchedule", "schedule_value", "SgdState", "sgd_step", "SGD"]


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine interpolation from ``start`` to ``end`` over ``total_steps``.

    Used for the learning rate, the dampening weight and the freezing threshold.
    ``CosineSchedule(0, 1e-3, T)`` is the ``cos(0, 1e-3)`` schedule.
    """

    start: float
    end: float
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")

    def __call__(self, step: int) -> float:
        return schedule_value(self, step)

    @classmethod
    def constant(cls, value: float, total_steps: int = 1) -> CosineSchedule:
        return cls(value, value, total_steps)


def schedule_value(s: CosineSchedule, step: int) -> float:
    """Value at ``step``; steps outside ``[0, total_steps]`` clamp to the endpoints."""
    if step <= 0:
        return s.start
    if step >= s.total_steps:
        return s.end
    return s.start + 0.5 * (s.end - s.start) * (1.0 - math.cos(math.pi * step / s.total_steps))


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: SgdState,
    masks: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """One heavy-ball step ``v <- mu*v + g; w <- w - lr*v``, returning new arrays.

    ``masks[name]`` (boolean, True = trainable) excludes entries from the update;
    masked entries keep both their value and their velocity.
    """
    out = {}
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = w
            continue
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {w.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
        if state.momentum == 0.0:
            v_new = g
        else:
            v_new = state.momentum * v + g
        mask = None if masks is None else masks.get(name)
        if mask is not None:
            v_new = np.where(mask, v_new, v)
            out[name] = np.where(mask, w - state.lr * v_new, w)
        else:
            out[name] = w - state.lr * v_new
        state.velocity[name] = v_new
    return out


class SGD:
    """In-place optimizer over named :class:`Tensor` parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.state = SgdState(lr=lr, momentum=momentum)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self, masks: dict[str, np.ndarray] | None = None) -> None:
        names = [n for n, p in self.params.items() if p.grad is not None]
        new = sgd_step(
            {n: self.params[n].data for n in names},
            {n: self.params[n].grad for n in names},
            self.state,
            masks,
        )
        for n in names:
            self.params[n].data = new[n]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
