import json
import subprocess
import sys

import pytest

from oscqat.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from oscqat.config import ConfigError, ExperimentConfig, load_config

TINY = {
    "seed": 0,
    "data": {"classes": 3, "n": 96, "height": 12, "width": 12},
    "optim": {"epochs": 1, "pretrain_epochs": 1, "batch_size": 16},
    "bn_batches": 2,
    "anneal_budget": 30,
}


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_defaults_validate():
    cfg = ExperimentConfig.from_dict({"seed": 1})
    assert cfg.w_bits == 3 and cfg.optim.lr == 0.01 and cfg.track_momentum == 0.01
    assert cfg.remedy.kind == "none"


def test_seed_is_mandatory():
    with pytest.raises(ConfigError, match="seed"):
        ExperimentConfig.from_dict({})
    assert ExperimentConfig.from_dict({}, seed=5).seed == 5


def test_seed_override_wins():
    assert ExperimentConfig.from_dict({"seed": 1}, seed=2).seed == 2


@pytest.mark.parametrize(
    "raw, where",
    [
        ({"seed": 0, "learning_rate": 0.1}, "learning_rate"),
        ({"seed": 0, "optim": {"lr": 0.1, "nesterov": True}}, "nesterov"),
        ({"seed": 0, "remedy": {"kind": "freeze", "treshold": 0.1}}, "treshold"),
    ],
)
def test_unknown_keys_rejected(raw, where):
    with pytest.raises(ConfigError, match=where):
        ExperimentConfig.from_dict(raw)


@pytest.mark.parametrize(
    "raw",
    [
        {"seed": "0"},
        {"seed": 0, "model": "vgg"},
        {"seed": 0, "w_bits": 1},
        {"seed": 0, "estimator": "magic"},
        {"seed": 0, "estimator": "ewgs", "estimator_param": -1.0},
        {"seed": 0, "remedy": {"kind": "prune"}},
        {"seed": 0, "remedy": {"kind": "freeze", "momentum": 1.5}},
        {"seed": 0, "optim": {"batch_size": 1}},
        {"seed": 0, "optim": {"lr": 0.0}},
        {"seed": 0, "data": {"source": "idx"}},
        {"seed": 0, "toy": {"w_star": 9.0}},
        {"seed": 0, "optim": "fast"},
    ],
)
def test_invalid_values_rejected(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_dumps_roundtrip():
    cfg = ExperimentConfig.from_dict(TINY)
    again = ExperimentConfig.from_dict(json.loads(cfg.dumps()))
    assert again == cfg


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="object"):
        load_config(bad)


def test_load_config_overrides(tmp_path):
    cfg = load_config(write(tmp_path, TINY), seed=9, out_dir=str(tmp_path / "o"))
    assert cfg.seed == 9 and cfg.out_dir == str(tmp_path / "o")


# command line


def test_cli_config_error_exit_code(tmp_path, capsys):
    path = write(tmp_path, {"seed": 0, "typo": 1})
    assert main(["train", "--config", str(path)]) == EXIT_CONFIG


def test_cli_missing_seed(tmp_path):
    path = write(tmp_path, {"name": "x"})
    assert main(["toy", "--config", str(path)]) == EXIT_CONFIG
    assert main(["toy", "--config", str(path), "--seed", "1", "--out", str(tmp_path / "t")]) == EXIT_OK


def test_cli_runtime_error_exit_code(tmp_path):
    path = write(tmp_path, {**TINY, "checkpoint": str(tmp_path / "nope.oqat")})
    assert main(["reestimate-bn", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME


def test_cli_bad_argument_values(tmp_path):
    path = write(tmp_path, TINY)
    assert main(["toy", "--config", str(path), "--dampen", "-1", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["sample", "--config", str(path), "--trials", "0", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_cli_toy_writes_trajectory(tmp_path, capsys):
    path = write(tmp_path, {"seed": 0, "toy": {"steps": 50}})
    out = tmp_path / "toy"
    assert main(["toy", "--config", str(path), "--out", str(out), "--estimator", "ewgs"]) == EXIT_OK
    assert (out / "trajectory.csv").exists()
    assert (out / "config.json").exists()
    printed = json.loads(capsys.readouterr().out)
    assert isinstance(printed, dict)


def test_cli_train_and_downstream_commands(tmp_path, capsys):
    path = write(tmp_path, TINY)
    out = tmp_path / "run"
    args = ["--config", str(path), "--out", str(out)]
    assert main(["train", *args]) == EXIT_OK
    for name in ("metrics.jsonl", "checkpoint.oqat", "checkpoint_reestimated.oqat", "summary.json", "config.json"):
        assert (out / name).exists(), name
    assert main(["reestimate-bn", *args]) == EXIT_OK
    assert (out / "reestimate_report.json").exists()
    assert main(["analyze", *args]) == EXIT_OK
    assert (out / "analysis.json").exists()
    assert main(["sample", *args, "--trials", "3"]) == EXIT_OK
    assert main(["anneal", *args]) == EXIT_OK


def test_console_script_module_entry(tmp_path):
    path = write(tmp_path, {"seed": 0, "toy": {"steps": 20}})
    proc = subprocess.run(
        [sys.executable, "-m", "oscqat.cli", "toy", "--config", str(path), "--out", str(tmp_path / "t")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "oscqat.cli", "nonsense"], capture_output=True, text=True)
    assert proc.returncode == 2  # argparse usage error
