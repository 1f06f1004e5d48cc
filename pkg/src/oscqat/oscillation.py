"""Per-weight oscillation tracking and the two remedies: dampening and freezing.

An oscillation event for a weight is an integer-value change whose direction is
opposite to the previous recorded change. Event frequency is tracked with an
EMA; weights whose frequency crosses a (scheduled) threshold are frozen to the
rounded EMA of their recent integer values.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, clip as clip_op, reduce_sum, square
from .optim import CosineSchedule
from .quant import QuantizerState, quantize_forward

logger = logging.getLogger(__name__)

__all__ = [
    "OscillationTracker",
    "DampenConfig",
    "FreezeConfig",
    "track_step",
    "dampen_loss",
    "dampen_penalty",
    "freeze_step",
    "update_integer_ema",
    "oscillating_fraction",
    "oscillating_levels",
    "sample_oscillating",
    "AnnealResult",
    "binary_optimize_oscillating",
]

DEFAULT_MOMENTUM = 0.01
OSC_THRESHOLD = 0.005


@dataclass
class OscillationTracker:
    """State of the oscillation EMA and freezing for one weight tensor."""

    f: np.ndarray
    last_change: np.ndarray
    w_int_prev: np.ndarray
    w_ema_int: np.ndarray
    frozen: np.ndarray
    frozen_int: np.ndarray
    momentum: float = DEFAULT_MOMENTUM

    @classmethod
    def init(cls, w_int, momentum: float = DEFAULT_MOMENTUM) -> OscillationTracker:
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"EMA momentum must lie in (0, 1), got {momentum}")
        w_int = np.asarray(w_int, dtype=np.int64)
        return cls(
            f=np.zeros(w_int.shape),
            last_change=np.zeros(w_int.shape, dtype=np.int64),
            w_int_prev=w_int.copy(),
            w_ema_int=w_int.astype(np.float64),
            frozen=np.zeros(w_int.shape, dtype=bool),
            frozen_int=np.zeros(w_int.shape, dtype=np.int64),
            momentum=momentum,
        )

    @property
    def size(self) -> int:
        return self.f.size

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "f": self.f,
            "last_change": self.last_change.astype(np.float64),
            "w_int_prev": self.w_int_prev.astype(np.float64),
            "w_ema_int": self.w_ema_int,
            "frozen": self.frozen.astype(np.float64),
            "frozen_int": self.frozen_int.astype(np.float64),
            "momentum": np.array([self.momentum]),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> OscillationTracker:
        return cls(
            f=arrays["f"].astype(np.float64),
            last_change=arrays["last_change"].astype(np.int64),
            w_int_prev=arrays["w_int_prev"].astype(np.int64),
            w_ema_int=arrays["w_ema_int"].astype(np.float64),
            frozen=arrays["frozen"] != 0,
            frozen_int=arrays["frozen_int"].astype(np.int64),
            momentum=float(arrays["momentum"].reshape(-1)[0]),
        )


@dataclass(frozen=True)
class DampenConfig:
    schedule: CosineSchedule

    def __post_init__(self):
        if min(self.schedule.start, self.schedule.end) < 0:
            raise ValueError("dampening weight must stay non-negative")

    def weight(self, step: int) -> float:
        return self.schedule(step)


@dataclass(frozen=True)
class FreezeConfig:
    schedule: CosineSchedule
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        for v in (self.schedule.start, self.schedule.end):
            if not 0.0 < v < 1.0:
                raise ValueError(f"freezing threshold must lie in (0, 1), got {v}")

    def threshold(self, step: int) -> float:
        return self.schedule(step)


def track_step(tracker: OscillationTracker, w_int_new) -> np.ndarray:
    """Record a new integer tensor; returns the boolean oscillation events."""
    w_int_new = np.asarray(w_int_new, dtype=np.int64)
    if w_int_new.shape != tracker.w_int_prev.shape:
        raise ValueError(f"tracker holds shape {tracker.w_int_prev.shape}, got {w_int_new.shape}")
    delta = w_int_new - tracker.w_int_prev
    sign = np.sign(delta)
    events = (sign != np.sign(tracker.last_change)) & (delta != 0)
    m = tracker.momentum
    tracker.f = m * events + (1.0 - m) * tracker.f
    tracker.last_change = np.where(events, delta, tracker.last_change)
    tracker.w_int_prev = w_int_new
    return events


def freeze_step(
    tracker: OscillationTracker,
    threshold: float | FreezeConfig,
    w_int=None,
    step: int | None = None,
) -> np.ndarray:
    """Freeze weights whose frequency exceeds ``threshold``; returns newly frozen mask.

    ``threshold`` is a number or a :class:`FreezeConfig` evaluated at ``step``.
    Frozen weights take the rounded integer EMA from before this step. The EMA is
    then advanced with ``w_int`` (default: the integer values last tracked).
    """
    if isinstance(threshold, FreezeConfig):
        if step is None:
            raise ValueError("freeze_step with a FreezeConfig needs the current step")
        threshold = threshold.threshold(step)
    new = (tracker.f > threshold) & ~tracker.frozen
    if new.any():
        tracker.frozen_int = np.where(new, np.round(tracker.w_ema_int).astype(np.int64), tracker.frozen_int)
        tracker.frozen = tracker.frozen | new
    update_integer_ema(tracker, w_int)
    return new


def update_integer_ema(tracker: OscillationTracker, w_int=None) -> None:
    """Advance the EMA of integer values (default: the integers last tracked).

    :func:`freeze_step` does this itself; runs without freezing call it directly
    so sampling and annealing see where each weight spent its time.
    """
    w_int = tracker.w_int_prev if w_int is None else np.asarray(w_int, dtype=np.int64)
    m = tracker.momentum
    tracker.w_ema_int = m * w_int + (1.0 - m) * tracker.w_ema_int


def oscillating_fraction(tracker: OscillationTracker, f_min: float = OSC_THRESHOLD) -> float:
    if tracker.size == 0:
        return 0.0
    return float(np.count_nonzero((tracker.f > f_min) & ~tracker.frozen)) / tracker.size


def dampen_loss(w, q: QuantizerState, lam: float) -> tuple[float, np.ndarray]:
    """Dampening penalty ``lam * ||w_hat - clip(w, s*n, s*p)||^2`` and its gradient.

    ``w_hat`` is treated as a constant target.
    """
    if lam < 0:
        raise ValueError(f"dampening weight must be >= 0, got {lam}")
    w = np.asarray(w, dtype=np.float64)
    w_hat, _ = quantize_forward(w, q)
    lo, hi = q.scale * q.n, q.scale * q.p
    resid = w_hat - np.clip(w, lo, hi)
    inside = (w >= lo) & (w <= hi)
    return lam * float(np.sum(resid**2)), lam * 2.0 * (w - w_hat) * inside


def dampen_penalty(w: Tensor, w_hat: np.ndarray, q: QuantizerState) -> Tensor:
    """Autodiff form of the (unweighted) dampening loss with ``w_hat`` held fixed."""
    clipped = clip_op(w, q.scale * q.n, q.scale * q.p)
    return reduce_sum(square(Tensor(w_hat) - clipped))


def oscillating_levels(tracker: OscillationTracker) -> tuple[np.ndarray, np.ndarray]:
    """The two integer levels each weight last moved between, as (low, high)."""
    other = tracker.w_int_prev - tracker.last_change
    return np.minimum(tracker.w_int_prev, other), np.maximum(tracker.w_int_prev, other)


def sample_oscillating(
    tracker: OscillationTracker,
    rng: np.random.Generator | int,
    f_min: float = OSC_THRESHOLD,
) -> np.ndarray:
    """Stochastically round oscillating weights by time spent at each level.

    A weight with frequency above ``f_min`` (and not frozen) takes level ``k + 1``
    with probability ``w_ema_int - k``; other weights keep their current integer.
    """
    rng = np.random.default_rng(rng)
    ema, lo, hi, mask = _sampling_setup(tracker, f_min)
    out = tracker.w_int_prev.copy()
    if not mask.any():
        return out
    k = np.floor(ema[mask])
    prob_up = ema[mask] - k
    draws = rng.random(prob_up.shape) < prob_up
    out[mask] = (k + draws).astype(np.int64)
    return out


def _sampling_setup(tracker: OscillationTracker, f_min: float):
    mask = (tracker.f > f_min) & ~tracker.frozen
    lo, hi = oscillating_levels(tracker)
    ema = tracker.w_ema_int.copy()
    outside = mask & ((ema < lo) | (ema > hi))
    if outside.any():
        logger.warning(
            "%d oscillating weights have an integer EMA outside their observed levels; clamping",
            int(outside.sum()),
        )
        ema = np.where(outside, np.clip(ema, lo, hi), ema)
    return ema, lo, hi, mask


@dataclass
class AnnealResult:
    values: np.ndarray
    loss: float
    initial_loss: float
    proposals: int
    accepted: int
    history: list[float] = field(default_factory=list)


def binary_optimize_oscillating(
    low: np.ndarray,
    loss_fn: Callable[[np.ndarray], float],
    initial: np.ndarray | None = None,
    budget: int | None = None,
    rng: np.random.Generator | int = 0,
    t_start: float | None = None,
    t_end: float | None = None,
) -> AnnealResult:
    """Simulated annealing over ``{low, low + 1}`` for each entry of ``low``.

    ``loss_fn`` maps an integer vector to a scalar loss. Single-entry flips are
    proposed and accepted with probability ``min(1, exp(-delta / T))`` while ``T``
    decays geometrically from ``t_start`` to ``t_end``. ``t_start=0`` gives a
    greedy descent. The best assignment seen is returned, so the result is never
    worse than ``initial``. Default budget: 50 proposals per entry.
    """
    rng = np.random.default_rng(rng)
    low = np.asarray(low, dtype=np.int64).reshape(-1)
    bits = np.zeros(low.shape, dtype=bool) if initial is None else np.asarray(initial).reshape(-1) > low
    current = low + bits
    loss = float(loss_fn(current))
    n = low.size
    if n == 0:
        return AnnealResult(current, loss, loss, 0, 0)
    budget = 50 * n if budget is None else int(budget)

    if t_start is None:
        # typical single-flip loss change sets the starting temperature
        probes = []
        for i in rng.choice(n, size=min(n, 8), replace=False):
            trial = current.copy()
            trial[i] = low[i] + (1 - bits[i])
            probes.append(abs(float(loss_fn(trial)) - loss))
        t_start = float(np.mean(probes)) if probes else 0.0
    if t_end is None:
        t_end = 1e-3 * t_start
    decay = (t_end / t_start) ** (1.0 / max(budget - 1, 1)) if t_start > 0 and t_end > 0 else 0.0

    best_vals, best_loss = current.copy(), loss
    initial_loss = loss
    temp = t_start
    accepted = 0
    history = [loss]
    for _ in range(budget):
        i = int(rng.integers(n))
        trial = current.copy()
        trial[i] = low[i] + (0 if trial[i] > low[i] else 1)
        trial_loss = float(loss_fn(trial))
        delta = trial_loss - loss
        if delta <= 0:
            accept = True
        elif temp > 0:
            accept = rng.random() < math.exp(-delta / temp)
        else:
            accept = False
        if accept:
            current, loss = trial, trial_loss
            accepted += 1
            if loss < best_loss:
                best_vals, best_loss = current.copy(), loss
        history.append(loss)
        temp *= decay
    return AnnealResult(best_vals, best_loss, initial_loss, budget, accepted, history)
