"""Experiment runners behind the command-line interface.

Each ``run_*`` function takes a validated :class:`ExperimentConfig`, writes its
artifacts under ``config.out_dir`` (with the config copied alongside) and
returns a small summary dict.
"""
from __future__ import annotations

import json
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ConfigError, ExperimentConfig
from .data import Dataset, iterate_batches, load_idx_pair, synthetic_blobs
from .nets import Ctx, Model, build_named_model, fanin_per_output, load_checkpoint, save_checkpoint
from .normstats import NormStats, bn_reestimate, kl_summary
from .optim import SGD, CosineSchedule
from .oscillation import (
    OSC_THRESHOLD,
    DampenConfig,
    FreezeConfig,
    OscillationTracker,
    binary_optimize_oscillating,
    dampen_penalty,
    freeze_step,
    oscillating_fraction,
    oscillating_levels,
    sample_oscillating,
    track_step,
    update_integer_ema,
)
from .quant import EstimatorKind, quantize_forward
from .toylab import (
    ToyProblem,
    compare_estimators,
    fit_line,
    frequency_sweep,
    lr_sweep,
    measure_frequency,
    simulate_trajectory,
    write_rows_csv,
    write_trajectory_csv,
)

logger = logging.getLogger(__name__)

__all__ = [
    "MetricsRecord",
    "TrainingAborted",
    "thread_limit",
    "ingest_dataset",
    "model_from_config",
    "evaluate",
    "run_toy",
    "run_train",
    "run_reestimate",
    "run_sample_or_anneal",
    "run_analyze",
]

SCALE_FLOOR = 1e-8


class TrainingAborted(RuntimeError):
    pass


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    loss: float
    lr: float
    remedy_value: float | None
    osc_fraction: float
    frozen_fraction: float
    mean_f: float
    pre_bn_acc: float | None = None
    post_bn_acc: float | None = None
    kl: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@contextmanager
def thread_limit():
    """Bound BLAS threads by ``OSC_QAT_THREADS`` (unset or 0 leaves the default)."""
    raw = os.environ.get("OSC_QAT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"OSC_QAT_THREADS must be an integer, got {raw!r}") from None
    if n <= 0:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps() + "\n")
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# data

def ingest_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.source == "synthetic":
        x, y = synthetic_blobs(d.classes, d.height, d.width, d.n, d.noise, d.data_seed)
        return _split(x, y, d.eval_fraction, d.data_seed)
    try:
        x, y = load_idx_pair(d.train_images, d.train_labels)
    except ValueError as exc:
        raise ConfigError(f"training data: {exc}") from None
    if d.eval_images and d.eval_labels:
        try:
            xe, ye = load_idx_pair(d.eval_images, d.eval_labels)
        except ValueError as exc:
            raise ConfigError(f"evaluation data: {exc}") from None
        if xe.shape[1:] != x.shape[1:]:
            raise ConfigError(f"evaluation images are {xe.shape[1:]}, training images are {x.shape[1:]}")
        return Dataset(x, y, xe, ye)
    return _split(x, y, d.eval_fraction, d.data_seed)


def _split(x, y, fraction, seed) -> Dataset:
    order = np.random.default_rng(seed + 1).permutation(len(x))
    n_eval = max(2, int(round(len(x) * fraction)))
    ev, tr = order[:n_eval], order[n_eval:]
    return Dataset(x[tr], y[tr], x[ev], y[ev])


def model_from_config(cfg: ExperimentConfig, data: Dataset, w_bits: int | None = None) -> Model:
    return build_named_model(
        cfg.model,
        in_ch=data.in_channels,
        classes=data.classes,
        w_bits=cfg.w_bits if w_bits is None else w_bits,
        a_bits=cfg.a_bits,
        estimator=cfg.estimator_kind(),
        seed=cfg.seed,
    )


def _bn_batches(cfg: ExperimentConfig, data: Dataset) -> list[np.ndarray]:
    rng = np.random.default_rng(cfg.seed + 2)
    out = []
    for xb, _ in iterate_batches(data.x_train, data.y_train, cfg.optim.batch_size, rng):
        out.append(xb)
        if len(out) == cfg.bn_batches:
            break
    return out


def _loss_batches(cfg: ExperimentConfig, data: Dataset) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(cfg.seed + 3)
    out = []
    for batch in iterate_batches(data.x_train, data.y_train, cfg.optim.batch_size, rng):
        out.append(batch)
        if len(out) == cfg.loss_batches:
            break
    return out


# evaluation

def evaluate(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 256, quantize: bool = True) -> float:
    """Top-1 accuracy with running BN statistics."""
    correct = 0
    ctx = Ctx(bn="eval", quantize=quantize)
    for i in range(0, len(x), batch_size):
        logits = model(x[i : i + batch_size], ctx).data
        correct += int(np.sum(np.argmax(logits, axis=1) == y[i : i + batch_size]))
    return correct / len(x)


def _snapshot_bn(model: Model) -> list[NormStats]:
    return [bn.stats.copy() for bn in model.batchnorms()]


def _restore_bn(model: Model, saved: list[NormStats]) -> None:
    for bn, s in zip(model.batchnorms(), saved):
        bn.stats = s


def bn_drift_report(model: Model, batches: list[np.ndarray]) -> tuple[dict, list[NormStats]]:
    """Per-layer KL between statistics aggregated over ``batches`` (population) and running statistics.

    Leaves the model's running statistics untouched; also returns the
    population statistics.
    """
    saved = _snapshot_bn(model)
    population = [s.copy() for s in bn_reestimate(model, batches)]
    _restore_bn(model, saved)
    report = {name: kl_summary(pop, bn.stats) for (name, bn), pop in zip(model.named_batchnorms(), population)}
    return report, population


def _eval_batches(data: Dataset, batch_size: int) -> list[np.ndarray]:
    n = len(data.x_eval)
    out = [data.x_eval[i : i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= 2]


def _pre_post_accuracy(model: Model, data: Dataset, bn_batches: list[np.ndarray], batch_size: int) -> tuple[float, float, dict]:
    """Accuracy with running stats, with re-estimated stats, and KL drift against the eval split."""
    pre = evaluate(model, data.x_eval, data.y_eval)
    kl, _ = bn_drift_report(model, _eval_batches(data, batch_size))
    saved = _snapshot_bn(model)
    bn_reestimate(model, bn_batches)
    post = evaluate(model, data.x_eval, data.y_eval)
    _restore_bn(model, saved)
    return pre, post, kl


# training

def _trackers(model: Model):
    return [(name, wq, w) for name, wq, w in model.weight_quantizers() if wq.tracker is not None]


def _tracker_summary(model: Model, bits: int | None = None) -> tuple[float, float, float]:
    """Oscillating fraction, frozen fraction and mean f, over layers at ``bits`` (all if None)."""
    total = osc = frozen = 0
    f_sum = 0.0
    for _, wq, _ in _trackers(model):
        if bits is not None and wq.bits != bits:
            continue
        t = wq.tracker
        total += t.size
        osc += oscillating_fraction(t) * t.size
        frozen += int(np.count_nonzero(t.frozen))
        f_sum += float(t.f.sum())
    if total == 0:
        return 0.0, 0.0, 0.0
    return osc / total, frozen / total, f_sum / total


def _pretrain(model: Model, cfg: ExperimentConfig, data: Dataset, rng: np.random.Generator) -> None:
    epochs = cfg.optim.pretrain_epochs
    if epochs == 0:
        return
    params = model.parameters(include_scales=False)
    opt = SGD(params, cfg.optim.pretrain_lr, cfg.optim.momentum)
    steps_per_epoch = len(data.x_train) // cfg.optim.batch_size
    sched = CosineSchedule(cfg.optim.pretrain_lr, 0.0, max(1, epochs * steps_per_epoch))
    ctx = Ctx(bn="train", quantize=False)
    step = 0
    for _ in range(epochs):
        for xb, yb in iterate_batches(data.x_train, data.y_train, cfg.optim.batch_size, rng):
            opt.lr = max(sched(step), 1e-12)
            loss = ad.cross_entropy(model(xb, ctx), yb)
            if not math.isfinite(loss.item()):
                raise TrainingAborted(f"non-finite loss during full-precision pretraining at step {step}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            step += 1


def _attach_trackers(model: Model, momentum: float) -> None:
    for _, wq, w in model.weight_quantizers():
        wq.tracker = OscillationTracker.init(wq.integers(w.data), momentum)


def _sync_quantizers(model: Model) -> None:
    for _, wq, _ in model.weight_quantizers():
        if wq.scale.data[0] < SCALE_FLOOR:
            wq.scale.data = np.array([SCALE_FLOOR])
        wq.sync()
    for _, aq in model.act_quantizers():
        if aq.scale.data[0] < SCALE_FLOOR:
            aq.scale.data = np.array([SCALE_FLOOR])
        aq.sync()


def _remedy(cfg: ExperimentConfig, total_steps: int):
    r = cfg.remedy
    sched = CosineSchedule(r.start, r.end, total_steps)
    if r.kind == "dampen":
        return DampenConfig(sched)
    if r.kind == "freeze":
        return FreezeConfig(sched, r.momentum)
    return None


def _masks(model: Model) -> dict[str, np.ndarray]:
    return {f"{name}.weight": ~wq.tracker.frozen for name, wq, _ in _trackers(model) if wq.tracker.frozen.any()}


def qat_step(model: Model, opt: SGD, xb, yb, step: int, remedy, remedy_bits: int | None = None) -> float:
    """Forward, (dampened) loss, backward, masked update, tracking and freezing.

    With ``remedy_bits`` set, dampening and freezing only touch weight tensors at
    that bit-width (the 8-bit edge layers are tracked but left alone).
    """
    ctx = Ctx(bn="train")
    loss = ad.cross_entropy(model(xb, ctx), yb)
    task = loss.item()
    if not math.isfinite(task):
        return task
    if isinstance(remedy, DampenConfig):
        lam = remedy.weight(step)
        if lam > 0:
            penalty = None
            for _, wq, w in model.weight_quantizers():
                if remedy_bits is not None and wq.bits != remedy_bits:
                    continue
                w_hat, _ = quantize_forward(w.data, wq.q)
                term = dampen_penalty(w, w_hat, wq.q)
                penalty = term if penalty is None else penalty + term
            loss = loss + penalty * lam
    opt.zero_grad()
    ad.backward(loss)
    opt.step(_masks(model))
    _sync_quantizers(model)
    for _, wq, w in model.weight_quantizers():
        t = wq.tracker
        track_step(t, wq.integers(w.data))
        if isinstance(remedy, FreezeConfig) and (remedy_bits is None or wq.bits == remedy_bits):
            freeze_step(t, remedy, step=step)
        else:
            update_integer_ema(t)
        if t.frozen.any():
            # park frozen latent weights on their grid point
            w.data = np.where(t.frozen, wq.q.scale * t.frozen_int, w.data)
    return loss.item()


def run_train(cfg: ExperimentConfig) -> dict:
    out = _prepare_out(cfg)
    data = ingest_dataset(cfg)
    rng = np.random.default_rng(cfg.seed)
    model = model_from_config(cfg, data)
    if cfg.pretrained:
        # reuse a full-precision starting point; quantizers are re-initialized below
        try:
            model.load_state_dict(load_checkpoint(cfg.pretrained))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"pretrained checkpoint: {exc}") from None
        for _, wq, _ in model.weight_quantizers():
            wq.tracker = None
    else:
        # separate stream, so QAT from a reused pretrained checkpoint replays exactly
        _pretrain(model, cfg, data, np.random.default_rng(cfg.seed + 4))
        save_checkpoint(out / "pretrained.oqat", model.state_dict())
    fp_acc = evaluate(model, data.x_eval, data.y_eval, quantize=False)

    bn_batches = _bn_batches(cfg, data)
    model.init_quantizers(bn_batches[0])
    _attach_trackers(model, cfg.remedy.momentum if cfg.remedy.kind == "freeze" else cfg.track_momentum)

    steps_per_epoch = len(data.x_train) // cfg.optim.batch_size
    total = cfg.optim.epochs * steps_per_epoch
    if total == 0:
        raise ConfigError(f"training set of {len(data.x_train)} samples is smaller than one batch")
    remedy = _remedy(cfg, total)
    lr_sched = CosineSchedule(cfg.optim.lr, 0.0, total)
    opt = SGD(model.parameters(), cfg.optim.lr, cfg.optim.momentum)

    metrics_path = out / "metrics.jsonl"
    step = 0
    with open(metrics_path, "w") as log:
        for epoch in range(cfg.optim.epochs):
            for xb, yb in iterate_batches(data.x_train, data.y_train, cfg.optim.batch_size, rng):
                opt.lr = max(lr_sched(step), 1e-12)
                last_good = model.state_dict()
                try:
                    loss = qat_step(model, opt, xb, yb, step, remedy, cfg.w_bits)
                except FloatingPointError:
                    loss = math.nan
                if not math.isfinite(loss):
                    save_checkpoint(out / "checkpoint_last_good.oqat", last_good)
                    raise TrainingAborted(
                        f"non-finite loss at step {step}; last good state saved to {out / 'checkpoint_last_good.oqat'}"
                    )
                osc, frozen, mean_f = _tracker_summary(model, cfg.w_bits)
                rec = MetricsRecord(
                    step=step,
                    epoch=epoch,
                    loss=loss,
                    lr=opt.lr,
                    remedy_value=None if remedy is None else remedy.schedule(step),
                    osc_fraction=osc,
                    frozen_fraction=frozen,
                    mean_f=mean_f,
                )
                end_of_epoch = step == (epoch + 1) * steps_per_epoch - 1
                if end_of_epoch and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.optim.epochs):
                    rec.pre_bn_acc, rec.post_bn_acc, rec.kl = _pre_post_accuracy(model, data, bn_batches, cfg.optim.batch_size)
                log.write(rec.to_json() + "\n")
                step += 1

    save_checkpoint(out / "checkpoint.oqat", model.state_dict())
    pre = evaluate(model, data.x_eval, data.y_eval)
    kl_before, _ = bn_drift_report(model, _eval_batches(data, cfg.optim.batch_size))
    bn_reestimate(model, bn_batches)
    post = evaluate(model, data.x_eval, data.y_eval)
    save_checkpoint(out / "checkpoint_reestimated.oqat", model.state_dict())
    osc, frozen, mean_f = _tracker_summary(model, cfg.w_bits)
    summary = {
        "fp_acc": fp_acc,
        "pre_bn_acc": pre,
        "post_bn_acc": post,
        "osc_fraction": osc,
        "osc_fraction_all_layers": _tracker_summary(model)[0],
        "frozen_fraction": frozen,
        "mean_f": mean_f,
        "steps": total,
        "kl_before": kl_before,
    }
    _write_json(out / "summary.json", summary)
    return summary


# checkpoint consumers

def _checkpoint_path(cfg: ExperimentConfig, default: str = "checkpoint.oqat") -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out_dir) / default


def load_trained(cfg: ExperimentConfig, data: Dataset, path: Path) -> Model:
    model = model_from_config(cfg, data)
    model.load_state_dict(load_checkpoint(path))
    return model


def run_reestimate(cfg: ExperimentConfig) -> dict:
    """Re-estimate BN statistics of a checkpoint in place; report per-layer KL before and after."""
    path = _checkpoint_path(cfg)
    data = ingest_dataset(cfg)
    model = load_trained(cfg, data, path)
    out = _prepare_out(cfg)
    if not model.batchnorms():
        logger.warning("model has no batch-norm layers; nothing to re-estimate")
        return {"layers": {}}
    batches = _bn_batches(cfg, data)
    before, _ = bn_drift_report(model, batches)
    population, _ = bn_drift_report(model, _eval_batches(data, cfg.optim.batch_size))
    pre = evaluate(model, data.x_eval, data.y_eval)
    bn_reestimate(model, batches)
    after, _ = bn_drift_report(model, batches)
    post = evaluate(model, data.x_eval, data.y_eval)
    save_checkpoint(path, model.state_dict())
    layers = {}
    for name, bn in model.named_batchnorms():
        layers[name] = {
            "kind": _bn_owner_kind(model, name),
            "before": before[name],
            "after": after[name],
            "eval_before": population[name],
        }
    report = {"checkpoint": str(path), "pre_bn_acc": pre, "post_bn_acc": post, "layers": layers}
    _write_json(out / "reestimate_report.json", report)
    return report


def _bn_owner_kind(model: Model, bn_name: str) -> str:
    """Kind of the weight layer feeding a BN layer (the module just before it)."""
    names = [n for n, _ in model.modules()]
    mods = dict(model.modules())
    idx = names.index(bn_name)
    for n in reversed(names[:idx]):
        m = mods[n]
        if getattr(m, "has_weight", False):
            return m.kind
    return "unknown"


def _oscillating_set(model: Model, bits: int | None = None) -> list[tuple]:
    """Oscillating, unfrozen weights per layer, restricted to layers at ``bits`` if given."""
    entries = []
    for name, wq, w in model.weight_quantizers():
        if bits is not None and wq.bits != bits:
            continue
        t = wq.tracker
        if t is None:
            raise ConfigError(
                f"checkpoint has no oscillation tracker state for layer {name}; retrain with tracking on"
            )
        idx = np.flatnonzero((t.f > OSC_THRESHOLD) & ~t.frozen)
        if idx.size:
            entries.append((name, wq, w, idx))
    return entries


def _make_loss_fn(model: Model, entries, batches):
    """Task loss with the oscillating weights set to the given integer vector."""
    base = {name: w.data.copy() for name, _, w, _ in entries}
    sizes = np.cumsum([0] + [idx.size for *_, idx in entries])
    ctx = Ctx(bn="batch")

    def loss_fn(ints: np.ndarray) -> float:
        for k, (name, wq, w, idx) in enumerate(entries):
            flat = base[name].copy().reshape(-1)
            flat[idx] = wq.q.scale * ints[sizes[k] : sizes[k + 1]]
            w.data = flat.reshape(w.shape)
        total = 0.0
        for xb, yb in batches:
            total += ad.cross_entropy(model(xb, ctx), yb).item()
        return total / len(batches)

    def restore():
        for name, _, w, _ in entries:
            w.data = base[name]

    return loss_fn, restore


def run_sample_or_anneal(cfg: ExperimentConfig, mode: str, trials: int | None = None) -> dict:
    if mode not in ("sample", "anneal"):
        raise ConfigError(f"mode must be 'sample' or 'anneal', got {mode!r}")
    path = _checkpoint_path(cfg)
    data = ingest_dataset(cfg)
    model = load_trained(cfg, data, path)
    entries = _oscillating_set(model, cfg.w_bits)
    out = _prepare_out(cfg)
    batches = _loss_batches(cfg, data)
    loss_fn, restore = _make_loss_fn(model, entries, batches)
    current = np.concatenate([wq.tracker.w_int_prev.reshape(-1)[idx] for _, wq, _, idx in entries]) if entries else np.zeros(0, np.int64)
    lows = np.concatenate([oscillating_levels(wq.tracker)[0].reshape(-1)[idx] for _, wq, _, idx in entries]) if entries else np.zeros(0, np.int64)
    ctx = Ctx(bn="batch")
    checkpoint_loss = sum(ad.cross_entropy(model(xb, ctx), yb).item() for xb, yb in batches) / len(batches)
    report = {"checkpoint": str(path), "mode": mode, "oscillating": int(current.size), "checkpoint_loss": checkpoint_loss}
    rng = np.random.default_rng(cfg.seed)
    if mode == "sample":
        trials = cfg.trials if trials is None else trials
        losses = []
        for _ in range(trials):
            ints = np.concatenate([
                sample_oscillating(_sub_tracker(wq.tracker, idx), rng) for _, wq, _, idx in entries
            ]) if entries else current
            losses.append(loss_fn(ints) if entries else checkpoint_loss)
        losses = np.array(losses)
        report.update({
            "trials": trials,
            "mean": float(losses.mean()),
            "std": float(losses.std()),
            "best": float(losses.min()),
            "losses": [float(v) for v in losses],
        })
    else:
        if entries:
            ema = np.concatenate([wq.tracker.w_ema_int.reshape(-1)[idx] for _, wq, _, idx in entries])
            start = np.clip(np.round(ema), lows, lows + 1).astype(np.int64)
            res = binary_optimize_oscillating(lows, loss_fn, initial=start, budget=cfg.anneal_budget, rng=rng)
            report.update({
                "loss": res.loss,
                "initial_loss": res.initial_loss,
                "proposals": res.proposals,
                "accepted": res.accepted,
            })
        else:
            report.update({"loss": checkpoint_loss, "initial_loss": checkpoint_loss, "proposals": 0, "accepted": 0})
    restore()
    _write_json(out / f"{mode}_report.json", report)
    return report


def _sub_tracker(t: OscillationTracker, idx: np.ndarray) -> OscillationTracker:
    """Flat view of the tracked entries at ``idx`` (all of which oscillate)."""
    return OscillationTracker(
        f=t.f.reshape(-1)[idx],
        last_change=t.last_change.reshape(-1)[idx],
        w_int_prev=t.w_int_prev.reshape(-1)[idx],
        w_ema_int=t.w_ema_int.reshape(-1)[idx],
        frozen=t.frozen.reshape(-1)[idx],
        frozen_int=t.frozen_int.reshape(-1)[idx],
        momentum=t.momentum,
    )


def run_analyze(cfg: ExperimentConfig) -> dict:
    """Per-layer oscillation and BN-drift report from a checkpoint and its metrics log."""
    path = _checkpoint_path(cfg)
    data = ingest_dataset(cfg)
    model = load_trained(cfg, data, path)
    out = _prepare_out(cfg)
    layers = {}
    for name, wq, w in model.weight_quantizers():
        layer = dict(model.modules())[name]
        row = {"kind": layer.kind, "bits": wq.bits, "fan_in": fanin_per_output(layer), "size": int(w.data.size)}
        if wq.tracker is not None:
            t = wq.tracker
            row.update({
                "osc_fraction": oscillating_fraction(t),
                "frozen_fraction": float(np.mean(t.frozen)),
                "mean_f": float(np.mean(t.f)),
            })
        layers[name] = row
    kl, _ = bn_drift_report(model, _eval_batches(data, cfg.optim.batch_size))
    report = {"checkpoint": str(path), "layers": layers, "kl": kl}
    metrics_path = Path(cfg.out_dir) / "metrics.jsonl"
    if metrics_path.exists():
        records = [json.loads(line) for line in metrics_path.read_text().splitlines() if line.strip()]
        steps = [r["step"] for r in records]
        evals = [r for r in records if r.get("pre_bn_acc") is not None]
        report["log"] = {
            "records": len(records),
            "contiguous": steps == list(range(len(steps))),
            "final_osc_fraction": records[-1]["osc_fraction"] if records else None,
            "evaluations": [{"step": r["step"], "pre_bn_acc": r["pre_bn_acc"], "post_bn_acc": r["post_bn_acc"]} for r in evals],
        }
    _write_json(out / "analysis.json", report)
    return report


# toy

def toy_problem(cfg: ExperimentConfig, estimator: str | None = None, dampen: float | None = None) -> ToyProblem:
    t = cfg.toy
    kind = cfg.estimator_kind() if estimator is None else _estimator(estimator, cfg)
    try:
        return ToyProblem(
            w_star=t.w_star, scale=t.scale, n=t.n, p=t.p, estimator=kind,
            lam=t.lam if dampen is None else dampen, lr=t.lr, w0=t.w0, steps=t.steps,
            track_momentum=cfg.track_momentum,
        )
    except ValueError as exc:
        raise ConfigError(f"toy: {exc}") from None


def _estimator(name: str, cfg: ExperimentConfig) -> EstimatorKind:
    param = cfg.estimator_param if name == cfg.estimator else None
    try:
        return EstimatorKind(name, param)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def run_toy(cfg: ExperimentConfig, estimator: str | None = None, dampen: float | None = None, sweep: str | None = None) -> dict:
    """Single trajectory, or one of the three sweep families."""
    base = toy_problem(cfg, estimator, dampen)
    kinds = [_estimator(name, cfg) for name in cfg.toy.estimators]
    out = _prepare_out(cfg)
    if sweep is None:
        traj = simulate_trajectory(base)
        write_trajectory_csv(out / "trajectory.csv", traj)
        start = int(0.8 * base.steps)
        return {"changes_final_20pct": traj.changes_after(start), "frequency": measure_frequency(traj.w_int)}
    if sweep == "frequency":
        rows = frequency_sweep(cfg.toy.ratios, replace(base, lam=0.0))
        write_rows_csv(out / "frequency_sweep.csv", ["distance_ratio", "frequency"], rows)
        slope, intercept = fit_line([r for r, _ in rows], [f for _, f in rows])
        return {"slope": slope, "intercept": intercept, "rows": rows}
    if sweep == "lr":
        rows = lr_sweep(cfg.toy.lrs, replace(base, lam=0.0))
        write_rows_csv(out / "lr_sweep.csv", ["lr", "amplitude", "frequency"], rows)
        return {"rows": rows}
    if sweep == "estimators":
        lam = dampen if dampen is not None else (cfg.toy.lam or None)
        trajs = compare_estimators(replace(base, lam=0.0), kinds, lam)
        start = int(0.8 * base.steps)
        result = {}
        for name, traj in trajs.items():
            write_trajectory_csv(out / f"trajectory_{name}.csv", traj)
            result[name] = traj.changes_after(start)
        return {"changes_final_20pct": result}
    raise ConfigError(f"unknown sweep {sweep!r}")
