"""JSON experiment configuration.

One experiment per file. Unknown keys are rejected so typos fail loudly rather
than silently falling back to defaults.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .nets import MODEL_ZOO
from .optim import CosineSchedule
from .oscillation import DampenConfig, FreezeConfig
from .quant import EstimatorKind

__all__ = [
    "ConfigError",
    "DataConfig",
    "RemedyConfig",
    "OptimConfig",
    "ToyConfig",
    "ExperimentConfig",
    "load_config",
]

REMEDIES = ("none", "dampen", "freeze")
SWEEPS = ("frequency", "lr", "estimators")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"
    # synthetic generator
    classes: int = 4
    height: int = 16
    width: int = 16
    n: int = 2048
    noise: float = 0.35
    data_seed: int = 7
    eval_fraction: float = 0.25
    # IDX files (train pair required, eval pair optional)
    train_images: str | None = None
    train_labels: str | None = None
    eval_images: str | None = None
    eval_labels: str | None = None

    def validate(self) -> None:
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"data.source must be 'synthetic' or 'idx', got {self.source!r}")
        if self.source == "idx" and not (self.train_images and self.train_labels):
            raise ConfigError("data.source='idx' needs train_images and train_labels")
        if self.source == "synthetic" and (self.classes < 2 or self.n < 8):
            raise ConfigError("synthetic data needs at least 2 classes and 8 samples")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError(f"data.eval_fraction must lie in (0, 1), got {self.eval_fraction}")


@dataclass
class RemedyConfig:
    """``kind`` is none, dampen (lambda schedule) or freeze (threshold schedule)."""

    kind: str = "none"
    start: float = 0.0
    end: float = 0.0
    momentum: float = 0.01

    def validate(self) -> None:
        if self.kind not in REMEDIES:
            raise ConfigError(f"remedy.kind must be one of {REMEDIES}, got {self.kind!r}")
        try:
            if self.kind == "dampen":
                DampenConfig(CosineSchedule(self.start, self.end, 1))
            elif self.kind == "freeze":
                FreezeConfig(CosineSchedule(self.start, self.end, 1), self.momentum)
        except ValueError as exc:
            raise ConfigError(f"remedy: {exc}") from None
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"remedy.momentum must lie in (0, 1), got {self.momentum}")


@dataclass
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    pretrain_epochs: int = 10
    pretrain_lr: float = 0.05

    def validate(self) -> None:
        if not (self.lr > 0 and self.pretrain_lr > 0):
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"optim.momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1 or self.pretrain_epochs < 0:
            raise ConfigError("need at least one QAT epoch and a non-negative pretraining budget")
        if self.batch_size < 2:
            raise ConfigError("batch normalization needs batch_size >= 2")


@dataclass
class ToyConfig:
    w_star: float = 0.8
    scale: float = 1.0
    n: int = -4
    p: int = 3
    lr: float = 0.2
    w0: float = 1.3
    steps: int = 4000
    lam: float = 0.0
    ratios: list[float] = field(default_factory=lambda: [round(0.05 * k, 2) for k in range(1, 11)])
    lrs: list[float] = field(default_factory=lambda: [0.4, 0.2, 0.1, 0.05])
    estimators: list[str] = field(default_factory=lambda: ["ste", "ewgs", "dsq"])

    def validate(self) -> None:
        if self.steps < 2 or self.lr <= 0 or self.scale <= 0:
            raise ConfigError("toy needs steps >= 2 and positive lr and scale")
        if not self.scale * self.n < self.w_star < self.scale * self.p:
            raise ConfigError(f"toy.w_star={self.w_star} must lie inside the grid")
        for name in self.estimators:
            if name not in ("ste", "ewgs", "psg", "dsq"):
                raise ConfigError(f"unknown toy estimator {name!r}")


@dataclass
class ExperimentConfig:
    seed: int
    name: str = "run"
    model: str = "toydwnet"
    w_bits: int = 3
    a_bits: int | None = None
    estimator: str = "ste"
    estimator_param: float | None = None
    track_momentum: float = 0.01
    bn_batches: int = 50
    eval_every: int = 1
    trials: int = 100
    anneal_budget: int | None = None
    loss_batches: int = 1
    checkpoint: str | None = None
    pretrained: str | None = None
    out_dir: str = "runs/run"
    data: DataConfig = field(default_factory=DataConfig)
    remedy: RemedyConfig = field(default_factory=RemedyConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)

    def validate(self) -> ExperimentConfig:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if self.model.lower() not in MODEL_ZOO:
            raise ConfigError(f"unknown model {self.model!r}; choose from {sorted(MODEL_ZOO)}")
        if not 2 <= self.w_bits <= 16:
            raise ConfigError(f"w_bits must lie in [2, 16], got {self.w_bits}")
        if self.a_bits is not None and not 2 <= self.a_bits <= 16:
            raise ConfigError(f"a_bits must lie in [2, 16], got {self.a_bits}")
        self.estimator_kind()
        if not 0.0 < self.track_momentum < 1.0:
            raise ConfigError("track_momentum must lie in (0, 1)")
        if self.bn_batches < 1 or self.eval_every < 1 or self.trials < 1 or self.loss_batches < 1:
            raise ConfigError("bn_batches, eval_every, trials and loss_batches must be >= 1")
        for part in (self.data, self.remedy, self.optim, self.toy):
            part.validate()
        return self

    def estimator_kind(self) -> EstimatorKind:
        try:
            return EstimatorKind(self.estimator, self.estimator_param)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict, seed: int | None = None) -> ExperimentConfig:
        raw = dict(raw)
        if seed is not None:
            raw["seed"] = seed
        if "seed" not in raw:
            raise ConfigError("config must set 'seed' (or pass --seed)")
        nested = {"data": DataConfig, "remedy": RemedyConfig, "optim": OptimConfig, "toy": ToyConfig}
        kwargs = {}
        for key, value in raw.items():
            if key in nested:
                if not isinstance(value, dict):
                    raise ConfigError(f"{key!r} must be an object")
                kwargs[key] = _build(nested[key], value, key)
            else:
                kwargs[key] = value
        return _build(cls, kwargs, "config").validate()


def _build(cls, values: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path, seed: int | None = None, out_dir: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    cfg = ExperimentConfig.from_dict(raw, seed=seed)
    if out_dir is not None:
        cfg.out_dir = out_dir
    return cfg
