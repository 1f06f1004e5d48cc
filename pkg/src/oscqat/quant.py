"""Simulated uniform quantization with a straight-through gradient and its variants.

The forward pass is ``w_hat = s * clip(round(w / s), n, p)`` with round-half-to-even.
Backward passes the upstream gradient through inside the grid (STE) and optionally
rescales it elementwise:

* ``ewgs``: ``1 + delta * sign(g) * (w - w_hat)``
* ``psg``:  ``|w - w_hat| + eps``
* ``dsq``:  normalized tanh derivative peaking at the decision thresholds

Every variant is a positive multiplier, so none of them can flip the direction
of the STE update.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, custom_op

__all__ = [
    "EstimatorKind",
    "QuantizerState",
    "quantize_forward",
    "ste_backward",
    "estimator_multiplier",
    "estimator_backward",
    "lsq_scale_gradient",
    "mse_range_init",
    "fake_quantize",
]

ESTIMATORS = ("ste", "ewgs", "psg", "dsq")
DEFAULT_PARAMS = {"ste": 0.0, "ewgs": 0.2, "psg": 1e-3, "dsq": 4.0}


@dataclass(frozen=True)
class EstimatorKind:
    """Gradient estimator and its single hyperparameter.

    ``param`` is delta for EWGS, epsilon for PSG and the temperature k for DSQ;
    it is ignored for plain STE.
    """

    name: str = "ste"
    param: float | None = None

    def __post_init__(self):
        if self.name not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.name!r}; choose from {ESTIMATORS}")
        if self.param is None:
            object.__setattr__(self, "param", DEFAULT_PARAMS[self.name])
        p = float(self.param)
        object.__setattr__(self, "param", p)
        if self.name == "ewgs" and p < 0:
            raise ValueError(f"EWGS delta must be >= 0, got {p}")
        if self.name in ("psg", "dsq") and not p > 0:
            raise ValueError(f"{self.name.upper()} parameter must be > 0, got {p}")

    @classmethod
    def ste(cls) -> EstimatorKind:
        return cls("ste")

    @classmethod
    def ewgs(cls, delta: float = DEFAULT_PARAMS["ewgs"]) -> EstimatorKind:
        return cls("ewgs", delta)

    @classmethod
    def psg(cls, eps: float = DEFAULT_PARAMS["psg"]) -> EstimatorKind:
        return cls("psg", eps)

    @classmethod
    def dsq(cls, k: float = DEFAULT_PARAMS["dsq"]) -> EstimatorKind:
        return cls("dsq", k)


@dataclass
class QuantizerState:
    scale: float
    n: int
    p: int
    bits: int
    signed: bool = True
    scale_trainable: bool = True
    estimator: EstimatorKind = field(default_factory=EstimatorKind)

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"quantization scale must be positive and finite, got {self.scale}")
        if not self.n < self.p:
            raise ValueError(f"need n < p, got n={self.n}, p={self.p}")

    @classmethod
    def for_bits(cls, bits: int, signed: bool = True, scale: float = 1.0, **kwargs) -> QuantizerState:
        if bits < 2:
            raise ValueError(f"bit-width must be >= 2, got {bits}")
        if signed:
            n, p = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
        else:
            n, p = 0, 2**bits - 1
        return cls(scale=scale, n=n, p=p, bits=bits, signed=signed, **kwargs)

    def with_scale(self, scale: float) -> QuantizerState:
        return replace(self, scale=float(scale))

    @property
    def levels(self) -> np.ndarray:
        return self.scale * np.arange(self.n, self.p + 1, dtype=np.float64)


def _finite(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if not np.isfinite(w).all():
        raise ValueError("cannot quantize non-finite values")
    return w


def quantize_forward(w, q: QuantizerState) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(w_hat, w_int)``; ties in ``w / s`` round half to even."""
    w = _finite(w)
    w_int = np.minimum(np.maximum(np.round(w / q.scale), q.n), q.p)
    return q.scale * w_int, w_int.astype(np.int64)


def _in_range(w: np.ndarray, q: QuantizerState) -> np.ndarray:
    r = w / q.scale
    return (r >= q.n) & (r <= q.p)


def ste_backward(g_out, w, q: QuantizerState) -> np.ndarray:
    g_out = np.asarray(g_out, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if g_out.shape != w.shape:
        raise ValueError(f"gradient shape {g_out.shape} does not match weight shape {w.shape}")
    return np.where(_in_range(w, q), g_out, 0.0)


def estimator_multiplier(g_out, w, w_hat, q: QuantizerState) -> np.ndarray:
    """Elementwise positive factor applied on top of the STE gradient."""
    est = q.estimator
    w = np.asarray(w, dtype=np.float64)
    if est.name == "ste":
        return np.ones_like(w)
    offset = w - np.asarray(w_hat, dtype=np.float64)
    if est.name == "ewgs":
        # |w - w_hat| <= s/2 inside the grid, so delta * s / 2 < 1 keeps the factor positive
        if est.param * q.scale / 2 >= 1.0:
            raise ValueError(
                f"EWGS delta={est.param} with scale={q.scale} can flip the gradient sign "
                "(need delta * scale / 2 < 1)"
            )
        return 1.0 + est.param * np.sign(g_out) * offset
    if est.name == "psg":
        return np.abs(offset) + est.param
    k = est.param
    # signed distance (in bins) to the nearest decision threshold, in [-0.5, 0]
    u = w / q.scale - np.round(w / q.scale)
    v = np.abs(u) - 0.5
    return k / (2.0 * math.tanh(k / 2.0)) * (1.0 - np.tanh(k * v) ** 2)


def estimator_backward(g_out, w, w_hat, q: QuantizerState) -> np.ndarray:
    g_ste = ste_backward(g_out, w, q)
    if q.estimator.name == "ste":
        return g_ste
    return g_ste * estimator_multiplier(g_out, w, w_hat, q)


def _scale_partial(w: np.ndarray, q: QuantizerState) -> np.ndarray:
    r = w / q.scale
    return np.where(r < q.n, float(q.n), np.where(r > q.p, float(q.p), np.round(r) - r))


def lsq_scale_gradient(g_out, w, q: QuantizerState) -> float:
    """LSQ step-size gradient with the ``1/sqrt(N * p)`` normalizer."""
    g_out = np.asarray(g_out, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    norm = 1.0 / math.sqrt(w.size * q.p)
    return float(np.sum(g_out * _scale_partial(w, q)) * norm)


def mse_range_init(w, bits: int, signed: bool = True, num_candidates: int = 100) -> float:
    """Grid-search the scale minimizing ``||w - q(w)||^2``.

    Candidates span ``max|w| / p * [0.1, 1.2]``, plus ``max|w| / k`` for every
    integer level ``k`` so a tensor already on a grid is recovered exactly. An
    all-zero tensor returns 1.0.
    """
    w = _finite(w)
    if w.size == 0:
        raise ValueError("mse_range_init needs a non-empty tensor")
    probe = QuantizerState.for_bits(bits, signed)
    max_abs = float(np.max(np.abs(w)))
    if max_abs == 0.0:
        return 1.0
    aligned = max_abs / np.arange(1, max(-probe.n, probe.p) + 1)
    candidates = np.concatenate([max_abs / probe.p * np.linspace(0.1, 1.2, num_candidates), aligned])
    flat = w.reshape(-1)
    r = flat[None, :] / candidates[:, None]
    w_hat = candidates[:, None] * np.clip(np.round(r), probe.n, probe.p)
    mse = np.sum((flat[None, :] - w_hat) ** 2, axis=1)
    return float(candidates[int(np.argmin(mse))])


def fake_quantize(
    w: Tensor,
    scale: Tensor,
    q: QuantizerState,
    frozen: np.ndarray | None = None,
    frozen_int: np.ndarray | None = None,
) -> Tensor:
    """Differentiable simulated quantization of ``w`` with a (possibly learned) scale.

    Entries where ``frozen`` is True are pinned to ``scale * frozen_int`` and pass
    no gradient to ``w``.
    """
    s = float(scale.data.reshape(-1)[0])
    qs = q if s == q.scale else q.with_scale(s)
    wd = w.data
    w_hat, w_int = quantize_forward(wd, qs)
    if frozen is not None and frozen.any():
        w_int = np.where(frozen, frozen_int, w_int)
        w_hat = s * w_int.astype(np.float64)

    def rule(g):
        g_w = g_s = None
        if w.requires_grad:
            g_w = estimator_backward(g, wd, w_hat, qs)
            if frozen is not None:
                g_w = np.where(frozen, 0.0, g_w)
        if scale.requires_grad:
            partial = _scale_partial(wd, qs)
            if frozen is not None:
                partial = np.where(frozen, w_int.astype(np.float64), partial)
            g_s = np.reshape(np.sum(g * partial) / math.sqrt(wd.size * qs.p), scale.shape)
        return g_w, g_s

    return custom_op(w_hat, (w, scale), rule)
