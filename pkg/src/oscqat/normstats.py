"""Batch normalization with EMA running statistics, re-estimation and KL drift."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .autodiff import Tensor, custom_op
from .quant import QuantizerState, quantize_forward

__all__ = [
    "NormStats",
    "StatsAccumulator",
    "bn_forward_train",
    "bn_forward_eval",
    "bn_reestimate",
    "kl_drift",
    "gaussian_kl",
    "kl_summary",
    "oscillation_drift_demo",
    "VAR_FLOOR",
    "BN_EPS",
]

VAR_FLOOR = 1e-12
BN_EPS = 1e-5


@dataclass
class NormStats:
    """Per-channel running mean/variance tracked with an EMA."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def init(cls, channels: int, momentum: float = 0.1) -> NormStats:
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"running-stats momentum must lie in (0, 1), got {momentum}")
        return cls(np.zeros(channels), np.ones(channels), momentum)

    @property
    def channels(self) -> int:
        return self.mean.size

    def copy(self) -> NormStats:
        return NormStats(self.mean.copy(), self.var.copy(), self.momentum)


def _axes(x: np.ndarray) -> tuple[int, ...]:
    return (0,) + tuple(range(2, x.ndim))


def _bshape(x: np.ndarray) -> tuple[int, ...]:
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def bn_forward_train(
    x: Tensor,
    stats: NormStats,
    gamma: Tensor,
    beta: Tensor,
    update: bool = True,
    eps: float = BN_EPS,
) -> Tensor:
    """Normalize with batch statistics; fold them into the running EMA if ``update``."""
    xd = x.data
    if xd.shape[0] < 2:
        raise ValueError(f"batch normalization needs a batch of at least 2, got {xd.shape[0]}")
    if xd.shape[1] != stats.channels:
        raise ValueError(f"expected {stats.channels} channels, got {xd.shape[1]}")
    axes = _axes(xd)
    bs = _bshape(xd)
    count = xd.size // xd.shape[1]
    mu = xd.mean(axis=axes)
    var = xd.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bs)) * inv_std.reshape(bs)
    g_ = gamma.data.reshape(bs)
    out = g_ * xhat + beta.data.reshape(bs)

    if update:
        mom = stats.momentum
        unbiased = var * count / (count - 1)
        stats.mean = (1.0 - mom) * stats.mean + mom * mu
        stats.var = np.maximum((1.0 - mom) * stats.var + mom * unbiased, VAR_FLOOR)

    def rule(g):
        g_gamma = (g * xhat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gx = (g_ * inv_std.reshape(bs)) * (
                g - (g_beta / count).reshape(bs) - xhat * (g_gamma / count).reshape(bs)
            )
        return gx, g_gamma.reshape(gamma.shape), g_beta.reshape(beta.shape)

    return custom_op(out, (x, gamma, beta), rule)


def bn_forward_eval(x: Tensor, stats: NormStats, gamma: Tensor, beta: Tensor, eps: float = BN_EPS) -> Tensor:
    bs = _bshape(x.data)
    inv_std = (1.0 / np.sqrt(stats.var + eps)).reshape(bs)
    mean = stats.mean.reshape(bs)
    xhat = (x.data - mean) * inv_std
    g_ = gamma.data.reshape(bs)
    axes = _axes(x.data)

    def rule(g):
        return g * g_ * inv_std, (g * xhat).sum(axis=axes).reshape(gamma.shape), g.sum(axis=axes).reshape(beta.shape)

    return custom_op(g_ * xhat + beta.data.reshape(bs), (x, gamma, beta), rule)


@dataclass
class StatsAccumulator:
    """Exact streaming per-channel mean and unbiased variance (pairwise merge)."""

    count: int = 0
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None

    def update(self, x: np.ndarray) -> None:
        axes = _axes(x)
        n = x.size // x.shape[1]
        mu = x.mean(axis=axes)
        m2 = ((x - mu.reshape(_bshape(x))) ** 2).sum(axis=axes)
        if self.mean is None:
            self.count, self.mean, self.m2 = n, mu, m2
            return
        total = self.count + n
        delta = mu - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + m2 + delta**2 * (self.count * n / total)
        self.count = total

    def result(self) -> tuple[np.ndarray, np.ndarray]:
        if self.mean is None or self.count < 2:
            raise ValueError("need at least two samples per channel to estimate a variance")
        return self.mean.copy(), np.maximum(self.m2 / (self.count - 1), VAR_FLOOR)


def bn_reestimate(model, batches: Iterable[np.ndarray]) -> list[NormStats]:
    """Replace every BN layer's running statistics by exact aggregates over ``batches``.

    ``model`` must provide ``batchnorms()`` (layers with a ``stats`` attribute) and
    ``collect_bn_inputs(x)`` returning each BN layer's input for batch ``x`` in
    the same order, computed with batch-statistics normalization.
    """
    layers = list(model.batchnorms())
    accs = [StatsAccumulator() for _ in layers]
    seen = 0
    for xb in batches:
        for acc, h in zip(accs, model.collect_bn_inputs(xb)):
            acc.update(h)
        seen += 1
    if seen == 0:
        raise ValueError("BN re-estimation needs at least one batch")
    for layer, acc in zip(layers, accs):
        mean, var = acc.result()
        layer.stats.mean, layer.stats.var = mean, var
    return [layer.stats for layer in layers]


def kl_drift(mu1, sigma1, mu2, sigma2) -> np.ndarray:
    """Drift between population N(mu1, sigma1) and estimate N(mu2, sigma2), per channel.

    ``log(s2^2 / s1^2) + (s1^2 + (mu1 - mu2)^2) / (2 s2^2) - 1/2``
    """
    mu1, sigma1, mu2, sigma2 = (np.asarray(a, dtype=np.float64) for a in (mu1, sigma1, mu2, sigma2))
    if np.any(sigma1 <= 0) or np.any(sigma2 <= 0):
        raise ValueError("standard deviations must be positive")
    v1, v2 = sigma1**2, sigma2**2
    return np.log(v2 / v1) + (v1 + (mu1 - mu2) ** 2) / (2.0 * v2) - 0.5


def gaussian_kl(mu1, sigma1, mu2, sigma2) -> np.ndarray:
    """Exact ``KL(N(mu1, sigma1) || N(mu2, sigma2))`` per channel; never negative.

    Differs from :func:`kl_drift` only in the log term, which here is
    ``log(s2 / s1)``. The drift formula can dip below zero when the estimate
    is slightly narrower than the population.
    """
    mu1, sigma1, mu2, sigma2 = (np.asarray(a, dtype=np.float64) for a in (mu1, sigma1, mu2, sigma2))
    if np.any(sigma1 <= 0) or np.any(sigma2 <= 0):
        raise ValueError("standard deviations must be positive")
    v1, v2 = sigma1**2, sigma2**2
    return 0.5 * np.log(v2 / v1) + (v1 + (mu1 - mu2) ** 2) / (2.0 * v2) - 0.5


def kl_summary(population: NormStats | tuple, estimate: NormStats | tuple) -> dict[str, float]:
    """Max and mean across channels of the drift formula, plus the same for the exact KL.

    ``population`` and ``estimate`` are NormStats or ``(mean, var)`` pairs.
    """
    m1, v1 = (population.mean, population.var) if isinstance(population, NormStats) else population
    m2, v2 = (estimate.mean, estimate.var) if isinstance(estimate, NormStats) else estimate
    s1, s2 = np.sqrt(v1), np.sqrt(v2)
    kl = kl_drift(m1, s1, m2, s2)
    exact = gaussian_kl(m1, s1, m2, s2)
    return {
        "max": float(np.max(kl)),
        "mean": float(np.mean(kl)),
        "exact_max": float(np.max(exact)),
        "exact_mean": float(np.mean(exact)),
    }


def oscillation_drift_demo(
    bits: int,
    frozen: bool = False,
    steps: int = 200,
    batch: int = 64,
    momentum: float = 0.1,
    seed: int = 0,
    w_range: float = 1.0,
) -> dict[str, float]:
    """Running-statistics corruption caused by one oscillating weight.

    A single channel ``y = q(w_t) * x`` feeds a BN layer. The latent weight
    alternates around a 3-bit decision threshold, the same latent trajectory
    for every ``bits`` (scale ``w_range / 2**(bits - 1)``). With ``frozen`` the
    quantized weight stays at its final level. Returns the drift between the
    statistics of the deployed (final) network over all seen inputs and the
    running estimate, plus the exact KL.
    """
    rng = np.random.default_rng(seed)
    q = QuantizerState.for_bits(bits, scale=w_range / 2 ** (bits - 1))
    coarse = w_range / 4  # 3-bit step
    threshold, amp = 1.5 * coarse, 0.05 * coarse
    latent = threshold + amp * (-1.0) ** np.arange(steps)
    w_hat, _ = quantize_forward(latent, q)
    if frozen:
        w_hat = np.full(steps, w_hat[-1])
    stats = NormStats.init(1, momentum)
    gamma, beta = Tensor(np.ones(1)), Tensor(np.zeros(1))
    xs = 1.0 + 0.5 * rng.standard_normal((steps, batch, 1))
    for t in range(steps):
        bn_forward_train(Tensor(w_hat[t] * xs[t]), stats, gamma, beta)
    acc = StatsAccumulator()
    for t in range(steps):
        acc.update(w_hat[-1] * xs[t])
    mean, var = acc.result()
    out = kl_summary((mean, var), stats)
    return {"kl": out["max"], "exact_kl": out["exact_max"]}
