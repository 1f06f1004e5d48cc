import json

import numpy as np
import pytest

from oscqat.config import ConfigError, ExperimentConfig
from oscqat.data import iterate_batches
from oscqat.nets import load_checkpoint, save_checkpoint
from oscqat.optim import SGD, CosineSchedule
from oscqat.oscillation import FreezeConfig
from oscqat.runner import (
    TrainingAborted,
    _attach_trackers,
    ingest_dataset,
    model_from_config,
    qat_step,
    run_analyze,
    run_reestimate,
    run_sample_or_anneal,
    run_train,
)

BASE = {
    "seed": 3,
    "data": {"classes": 3, "n": 128, "height": 12, "width": 12, "noise": 0.5},
    "optim": {"epochs": 2, "pretrain_epochs": 1, "batch_size": 16, "lr": 0.05},
    "bn_batches": 3,
    "anneal_budget": 60,
    "trials": 8,
}


def make_cfg(tmp_path, name="run", **overrides):
    raw = json.loads(json.dumps(BASE))
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key].update(value)
        else:
            raw[key] = value
    raw["out_dir"] = str(tmp_path / name)
    return ExperimentConfig.from_dict(raw)


def records(cfg):
    with open(cfg.out_dir + "/metrics.jsonl") as fh:
        return [json.loads(line) for line in fh]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = make_cfg(root)
    summary = run_train(cfg)
    return cfg, summary


def test_train_outputs(trained):
    cfg, summary = trained
    for key in ("fp_acc", "pre_bn_acc", "post_bn_acc", "osc_fraction", "frozen_fraction", "steps"):
        assert key in summary
    assert summary["steps"] == 2 * (96 // 16)
    on_disk = json.load(open(cfg.out_dir + "/summary.json"))
    assert on_disk["steps"] == summary["steps"]
    assert ExperimentConfig.from_dict(json.load(open(cfg.out_dir + "/config.json"))) == cfg


def test_metrics_log_is_contiguous_with_epoch_evals(trained):
    cfg, summary = trained
    recs = records(cfg)
    assert [r["step"] for r in recs] == list(range(summary["steps"]))
    evals = [r["step"] for r in recs if r["pre_bn_acc"] is not None]
    assert evals == [5, 11]
    assert all(r["kl"] is not None for r in recs if r["pre_bn_acc"] is not None)


def test_lr_follows_cosine(trained):
    cfg, summary = trained
    sched = CosineSchedule(cfg.optim.lr, 0.0, summary["steps"])
    for r in records(cfg):
        assert r["lr"] == pytest.approx(max(sched(r["step"]), 1e-12), rel=1e-12)
        assert r["remedy_value"] is None


def test_remedy_schedule_logged(tmp_path):
    cfg = make_cfg(tmp_path, remedy={"kind": "dampen", "start": 0.0, "end": 1e-3}, optim={"epochs": 1})
    summary = run_train(cfg)
    sched = CosineSchedule(0.0, 1e-3, summary["steps"])
    for r in records(cfg):
        assert r["remedy_value"] == pytest.approx(sched(r["step"]), abs=1e-18)


def test_training_is_deterministic(tmp_path):
    a = make_cfg(tmp_path, "a", remedy={"kind": "freeze", "start": 0.04, "end": 0.01}, optim={"epochs": 1})
    b = make_cfg(tmp_path, "b", remedy={"kind": "freeze", "start": 0.04, "end": 0.01}, optim={"epochs": 1})
    run_train(a)
    run_train(b)
    for name in ("metrics.jsonl", "checkpoint.oqat", "checkpoint_reestimated.oqat", "pretrained.oqat", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_frozen_weights_keep_their_integers(tmp_path):
    cfg = make_cfg(tmp_path)
    data = ingest_dataset(cfg)
    model = model_from_config(cfg, data)
    model.init_quantizers(data.x_train[:16])
    _attach_trackers(model, 0.2)  # fast EMA so freezing kicks in within a few steps
    freeze = FreezeConfig(CosineSchedule(0.3, 0.1, 30), momentum=0.2)
    opt = SGD(model.parameters(), 0.2, 0.9)
    rng = np.random.default_rng(0)
    frozen_at: dict = {}
    prev_frozen = None
    step = 0
    while step < 30:
        for xb, yb in iterate_batches(data.x_train, data.y_train, 16, rng):
            qat_step(model, opt, xb, yb, step, freeze)
            for name, wq, w in model.weight_quantizers():
                t = wq.tracker
                ints = wq.integers(w.data)
                if prev_frozen is not None:
                    assert np.all(t.frozen | ~prev_frozen[name]), "frozen set shrank"
                for idx in zip(*np.nonzero(t.frozen)):
                    key = (name, idx)
                    frozen_at.setdefault(key, ints[idx])
                    assert ints[idx] == frozen_at[key]
                    assert w.data[idx] == pytest.approx(wq.q.scale * t.frozen_int[idx])
            prev_frozen = {name: wq.tracker.frozen.copy() for name, wq, _ in model.weight_quantizers()}
            step += 1
            if step == 30:
                break
    assert frozen_at, "nothing froze; the test is vacuous"


def test_integer_ema_tracked_without_freezing(trained):
    cfg, _ = trained
    state = load_checkpoint(cfg.out_dir + "/checkpoint.oqat")
    fractional = [
        np.mean(state[k] != np.round(state[k])) for k in state if k.endswith(".wq.tracker.w_ema_int")
    ]
    assert fractional and min(fractional) > 0


def test_remedies_leave_edge_layers_alone(tmp_path):
    cfg = make_cfg(tmp_path, remedy={"kind": "freeze", "start": 0.02, "end": 0.011}, optim={"epochs": 1})
    run_train(cfg)
    state = load_checkpoint(cfg.out_dir + "/checkpoint.oqat")
    model = model_from_config(cfg, ingest_dataset(cfg))
    model.load_state_dict(state)
    for _, wq, _ in model.weight_quantizers():
        if wq.bits == 8:
            assert not wq.tracker.frozen.any()


def test_nan_loss_aborts_with_last_good_checkpoint(tmp_path, trained, monkeypatch):
    import oscqat.runner as runner

    real = runner.ingest_dataset

    def poisoned(cfg):
        data = real(cfg)
        data.x_train[-1, 0, 0, 0] = np.nan
        return data

    monkeypatch.setattr(runner, "ingest_dataset", poisoned)
    cfg = make_cfg(tmp_path, pretrained=trained[0].out_dir + "/pretrained.oqat", optim={"epochs": 1})
    with pytest.raises(TrainingAborted, match="step"):
        run_train(cfg)
    last_good = load_checkpoint(tmp_path / "run" / "checkpoint_last_good.oqat")
    assert all(np.all(np.isfinite(v)) for v in last_good.values())
    steps = [r["step"] for r in records(cfg)]
    assert steps == list(range(len(steps)))


def test_pretrained_reuse_matches(tmp_path, trained):
    cfg, summary = trained
    again = make_cfg(tmp_path, pretrained=cfg.out_dir + "/pretrained.oqat")
    out = run_train(again)
    assert out["fp_acc"] == summary["fp_acc"]
    assert (tmp_path / "run" / "metrics.jsonl").read_bytes() == open(cfg.out_dir + "/metrics.jsonl", "rb").read()


def test_bad_pretrained_checkpoint(tmp_path):
    (tmp_path / "bad.oqat").write_bytes(b"junk")
    with pytest.raises(ConfigError):
        run_train(make_cfg(tmp_path, pretrained=str(tmp_path / "bad.oqat")))


def test_reestimate_is_idempotent(tmp_path, trained):
    cfg, _ = trained
    ckpt = tmp_path / "c.oqat"
    ckpt.write_bytes(open(cfg.out_dir + "/checkpoint.oqat", "rb").read())
    run_cfg = make_cfg(tmp_path, "re", checkpoint=str(ckpt))
    first = run_reestimate(run_cfg)
    bytes_after_first = ckpt.read_bytes()
    second = run_reestimate(run_cfg)
    assert ckpt.read_bytes() == bytes_after_first
    for name, layer in second["layers"].items():
        assert abs(layer["before"]["max"]) <= 1e-9
        assert abs(layer["after"]["max"]) <= 1e-9
        assert layer["kind"] in ("conv", "pointwise-conv", "depthwise-conv")
    assert first["post_bn_acc"] == second["post_bn_acc"] == second["pre_bn_acc"]


def test_sample_and_anneal_reports(tmp_path, trained):
    cfg, _ = trained
    run_cfg = make_cfg(tmp_path, "sa", checkpoint=cfg.out_dir + "/checkpoint.oqat")
    sample = run_sample_or_anneal(run_cfg, "sample")
    anneal = run_sample_or_anneal(run_cfg, "anneal")
    assert sample["oscillating"] == anneal["oscillating"] > 0
    assert len(sample["losses"]) == 8
    assert sample["best"] <= sample["mean"]
    assert sample["std"] > 0  # the integer EMA moved during training, so draws differ
    assert anneal["loss"] <= anneal["initial_loss"]
    assert anneal["proposals"] == 60
    # the checkpoint on disk is untouched
    assert load_checkpoint(cfg.out_dir + "/checkpoint.oqat").keys()
    again = run_sample_or_anneal(run_cfg, "sample")
    assert again["losses"] == sample["losses"]


def test_zero_oscillation_degenerate_case(tmp_path, trained):
    cfg, _ = trained
    state = load_checkpoint(cfg.out_dir + "/checkpoint.oqat")
    for key in state:
        if key.endswith(".wq.tracker.f"):
            state[key] = np.zeros_like(state[key])
    save_checkpoint(tmp_path / "still.oqat", state)
    run_cfg = make_cfg(tmp_path, "still", checkpoint=str(tmp_path / "still.oqat"))
    sample = run_sample_or_anneal(run_cfg, "sample")
    anneal = run_sample_or_anneal(run_cfg, "anneal")
    assert sample["oscillating"] == 0
    assert sample["std"] == 0.0 and sample["mean"] == sample["checkpoint_loss"]
    assert anneal["proposals"] == 0 and anneal["loss"] == anneal["checkpoint_loss"]


def test_sampling_needs_tracker_state(tmp_path, trained):
    cfg, _ = trained
    state = {k: v for k, v in load_checkpoint(cfg.out_dir + "/checkpoint.oqat").items() if ".tracker." not in k}
    save_checkpoint(tmp_path / "bare.oqat", state)
    with pytest.raises(ConfigError, match="tracker"):
        run_sample_or_anneal(make_cfg(tmp_path, "bare", checkpoint=str(tmp_path / "bare.oqat")), "sample")


def test_analyze_report(trained):
    cfg, _ = trained
    report = run_analyze(cfg)
    kinds = {row["kind"] for row in report["layers"].values()}
    assert {"conv", "depthwise-conv", "pointwise-conv", "linear"} <= kinds
    assert report["log"]["contiguous"]
    dw = next(row for row in report["layers"].values() if row["kind"] == "depthwise-conv")
    assert dw["fan_in"] == 9
