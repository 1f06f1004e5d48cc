"""One-dimensional quantized least-squares problem.

Minimizing ``E[(x*w_star - x*q(w))^2] / 2`` with a straight-through gradient
drives the latent weight to the decision threshold between the two grid points
around ``w_star``, where it oscillates instead of converging. This module
simulates that dynamic through the autodiff engine, provides the closed-form
single-step updates as an oracle, and measures oscillation frequency and
amplitude.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .autodiff import Tensor, backward, square
from .optim import SgdState, sgd_step
from .oscillation import OscillationTracker, dampen_penalty, track_step
from .quant import EstimatorKind, QuantizerState, estimator_backward, fake_quantize, quantize_forward

__all__ = [
    "ToyProblem",
    "Trajectory",
    "toy_gradient",
    "simulate_trajectory",
    "closed_form_update",
    "measure_frequency",
    "measure_amplitude",
    "critical_dampening",
    "frequency_sweep",
    "lr_sweep",
    "compare_estimators",
    "write_trajectory_csv",
    "write_rows_csv",
    "fit_line",
]


@dataclass(frozen=True)
class ToyProblem:
    w_star: float = 0.8
    scale: float = 1.0
    sigma2: float = 1.0
    n: int = -4
    p: int = 3
    estimator: EstimatorKind = field(default_factory=EstimatorKind)
    lam: float = 0.0
    lr: float = 0.2
    w0: float = 1.3
    steps: int = 4000
    track_momentum: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.sigma2 < math.inf:
            raise ValueError(f"data variance must be positive and finite, got {self.sigma2}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not self.scale * self.n < self.w_star < self.scale * self.p:
            raise ValueError(f"w_star={self.w_star} must lie strictly inside the grid range")
        if self.lam < 0:
            raise ValueError("dampening weight must be >= 0")
        if not self.lr > 0 or self.steps < 1:
            raise ValueError("need a positive learning rate and at least one step")

    @property
    def quantizer(self) -> QuantizerState:
        bits = max(2, math.ceil(math.log2(self.p - self.n + 1)))
        return QuantizerState(self.scale, self.n, self.p, bits=bits, scale_trainable=False, estimator=self.estimator)

    @property
    def upper(self) -> float:
        return float(quantize_forward(self.w_star + self.scale / 2, self.quantizer)[0])

    @property
    def lower(self) -> float:
        return float(quantize_forward(self.w_star - self.scale / 2, self.quantizer)[0])

    @property
    def threshold(self) -> float:
        return (self.upper + self.lower) / 2

    @property
    def distance(self) -> float:
        """Distance from ``w_star`` to its nearest grid point."""
        return abs(float(quantize_forward(self.w_star, self.quantizer)[0]) - self.w_star)


@dataclass
class Trajectory:
    latent: np.ndarray
    w_int: np.ndarray
    f: np.ndarray
    tracker: OscillationTracker

    def changes_after(self, start: int) -> int:
        return int(np.count_nonzero(np.diff(self.w_int[start:])))


def toy_gradient(w: float, problem: ToyProblem) -> float:
    """Estimator gradient of the expected toy loss at latent weight ``w``."""
    q = problem.quantizer
    w = np.asarray(w, dtype=np.float64)
    w_hat, _ = quantize_forward(w, q)
    g = problem.sigma2 * (w_hat - problem.w_star)
    return float(estimator_backward(g, w, w_hat, q))


def _step_graph(w_val: float, problem: ToyProblem, q: QuantizerState, scale: Tensor) -> float:
    w = Tensor(np.array([w_val]), requires_grad=True)
    w_hat = fake_quantize(w, scale, q)
    loss = square(w_hat - problem.w_star).sum() * (0.5 * problem.sigma2)
    if problem.lam > 0:
        loss = loss + dampen_penalty(w, w_hat.data, q) * problem.lam
    return float(backward(loss)[w][0])


def simulate_trajectory(problem: ToyProblem) -> Trajectory:
    """Run ``problem.steps`` plain gradient-descent steps through the autodiff graph."""
    q = problem.quantizer
    scale = Tensor([problem.scale])
    state = SgdState(lr=problem.lr, momentum=0.0)
    span = problem.scale * (problem.p - problem.n)
    T = problem.steps
    latent = np.empty(T + 1)
    w_int = np.empty(T + 1, dtype=np.int64)
    f = np.empty(T + 1)
    w = float(problem.w0)
    latent[0] = w
    w_int[0] = quantize_forward(w, q)[1]
    tracker = OscillationTracker.init(np.array([w_int[0]]), problem.track_momentum)
    f[0] = 0.0
    params = {"w": np.array([w])}
    for t in range(1, T + 1):
        g = _step_graph(float(params["w"][0]), problem, q, scale)
        params = sgd_step(params, {"w": np.array([g])}, state)
        w = float(params["w"][0])
        if not math.isfinite(w) or abs(w) > 10 * span:
            raise FloatingPointError(f"toy trajectory diverged at step {t} (w={w})")
        latent[t] = w
        w_int[t] = quantize_forward(w, q)[1]
        track_step(tracker, np.array([w_int[t]]))
        f[t] = tracker.f[0]
    return Trajectory(latent, w_int, f, tracker)


def closed_form_update(w: float, problem: ToyProblem) -> float:
    """Analytical gradient-descent step for STE, PSG, EWGS or STE + dampening (sigma = 1)."""
    if problem.sigma2 != 1.0:
        raise ValueError("closed-form updates assume unit data variance")
    up, down, thr = problem.upper, problem.lower, problem.threshold
    lo, hi = problem.scale * problem.n, problem.scale * problem.p
    if not (lo <= down and up <= hi and down <= w <= up):
        raise ValueError("closed-form updates assume no clipping and w between the two grid points")
    est, eta, ws = problem.estimator, problem.lr, problem.w_star
    if problem.lam > 0 and est.name != "ste":
        raise ValueError("dampening closed form is only defined on top of STE")
    above = w >= thr
    level = up if above else down
    if problem.lam > 0:
        return w - eta * (level - ws + 2 * problem.lam * (w - level))
    if est.name == "ste":
        return w - eta * (level - ws)
    if est.name == "psg":
        factor = (up - w + est.param) if above else (w - down + est.param)
        return w - eta * (level - ws) * factor
    if est.name == "ewgs":
        factor = (1 + est.param * (w - up)) if above else (1 - est.param * (w - down))
        return w - eta * (level - ws) * factor
    raise ValueError(f"no closed-form update for estimator {est.name!r}")


def _burn(n: int, burn_in: int | None) -> int:
    return n // 2 if burn_in is None else burn_in


def measure_frequency(w_int: np.ndarray, burn_in: int | None = None) -> float:
    """Oscillation cycles per step after ``burn_in`` (default: half the run).

    One cycle is a round trip between the two levels, i.e. two integer changes.
    """
    w_int = np.asarray(w_int)
    burn_in = _burn(len(w_int), burn_in)
    if len(w_int) - burn_in < 2:
        raise ValueError(f"trajectory of length {len(w_int)} is too short for burn-in {burn_in}")
    window = w_int[burn_in:]
    changes = np.count_nonzero(np.diff(window))
    return changes / (2.0 * (len(window) - 1))


def measure_amplitude(latent: np.ndarray, burn_in: int | None = None, w_int: np.ndarray | None = None) -> tuple[float, bool]:
    """Peak-to-peak latent amplitude after burn-in, and whether oscillation was found.

    With ``w_int`` given, oscillation means the integer value still changes;
    otherwise it means the latent increments still change sign.
    """
    latent = np.asarray(latent, dtype=np.float64)
    burn_in = _burn(len(latent), burn_in)
    window = latent[burn_in:]
    if len(window) < 2:
        raise ValueError("trajectory too short for the requested burn-in")
    if w_int is not None:
        moving = np.count_nonzero(np.diff(np.asarray(w_int)[burn_in:])) > 0
    else:
        steps = np.diff(window)
        moving = bool(np.any(steps[:-1] * steps[1:] < 0))
    if not moving:
        return 0.0, False
    return float(window.max() - window.min()), True


def critical_dampening(problem: ToyProblem) -> float:
    """Smallest dampening weight giving a stable fixed point inside both bins."""
    d_up = problem.upper - problem.w_star
    d_down = problem.w_star - problem.lower
    return problem.sigma2 * max(d_up, d_down) / problem.scale


def fit_line(x: Iterable[float], y: Iterable[float]) -> tuple[float, float]:
    """Least-squares ``(slope, intercept)``."""
    slope, intercept = np.polyfit(np.asarray(list(x), float), np.asarray(list(y), float), 1)
    return float(slope), float(intercept)


def frequency_sweep(
    ratios: Iterable[float] = tuple(np.round(np.arange(1, 11) * 0.05, 2)),
    base: ToyProblem | None = None,
) -> list[tuple[float, float]]:
    """Measured frequency for ``w_star = s * (1 - d/s)``, i.e. distance d below grid point 1."""
    base = base or ToyProblem()
    rows = []
    for r in ratios:
        problem = replace(base, w_star=base.scale * (1.0 - r))
        traj = simulate_trajectory(problem)
        rows.append((float(r), measure_frequency(traj.w_int)))
    return rows


def lr_sweep(
    lrs: Iterable[float] = (0.4, 0.2, 0.1, 0.05),
    base: ToyProblem | None = None,
) -> list[tuple[float, float, float]]:
    """``(lr, amplitude, frequency)`` for a fixed problem."""
    base = base or ToyProblem()
    rows = []
    for lr in lrs:
        traj = simulate_trajectory(replace(base, lr=lr))
        amp, _ = measure_amplitude(traj.latent, w_int=traj.w_int)
        rows.append((float(lr), amp, measure_frequency(traj.w_int)))
    return rows


def compare_estimators(
    base: ToyProblem | None = None,
    estimators: Iterable[EstimatorKind] = (EstimatorKind.ste(), EstimatorKind.ewgs(), EstimatorKind.dsq()),
    dampen: float | None = None,
) -> dict[str, Trajectory]:
    """Trajectories for each estimator, plus STE with dampening when ``dampen`` is given."""
    base = base or ToyProblem()
    out = {e.name: simulate_trajectory(replace(base, estimator=e, lam=0.0)) for e in estimators}
    if dampen is not None:
        out["dampen"] = simulate_trajectory(replace(base, estimator=EstimatorKind.ste(), lam=dampen))
    return out


def write_trajectory_csv(path, traj: Trajectory) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "latent_w", "w_int", "f_ema"])
        for t, (w, k, f) in enumerate(zip(traj.latent, traj.w_int, traj.f)):
            writer.writerow([t, repr(float(w)), int(k), repr(float(f))])


def write_rows_csv(path, header: list[str], rows: Iterable[tuple]) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])
