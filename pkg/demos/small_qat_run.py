"""
A small QAT run end to end
==========================

Trains the depthwise toy network on synthetic blobs with 3-bit weights, once
plainly and once with iterative freezing, then re-estimates BN statistics and
compares stochastic rounding with annealing on the oscillating weights. Takes
about a minute. The configuration lives in configs/quick.json; outputs go to
a temporary directory unless a path is given.

    python demos/small_qat_run.py [out_dir]
"""
import json
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from oscqat.config import RemedyConfig, load_config
from oscqat.runner import run_reestimate, run_sample_or_anneal, run_train

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="oscqat-"))
cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "quick.json", out_dir=str(root / "baseline"))

base = run_train(cfg)
print("baseline:", json.dumps({k: base[k] for k in ("fp_acc", "pre_bn_acc", "post_bn_acc", "osc_fraction")}))

frozen_cfg = replace(
    cfg,
    out_dir=str(root / "freeze"),
    pretrained=str(root / "baseline" / "pretrained.oqat"),
    remedy=RemedyConfig(kind="freeze", start=0.04, end=0.01),
)
frz = run_train(frozen_cfg)
print("freezing:", json.dumps({k: frz[k] for k in ("pre_bn_acc", "post_bn_acc", "osc_fraction", "frozen_fraction")}))

# BN re-estimation on the saved baseline checkpoint (run_train already did it once,
# so the second pass should change nothing)
re_cfg = replace(cfg, checkpoint=str(root / "baseline" / "checkpoint_reestimated.oqat"))
report = run_reestimate(re_cfg)
print(f"re-estimation: accuracy {report['pre_bn_acc']:.4f} -> {report['post_bn_acc']:.4f}")

sa_cfg = replace(cfg, checkpoint=str(root / "baseline" / "checkpoint.oqat"), out_dir=str(root / "rounding"))
sample = run_sample_or_anneal(sa_cfg, "sample", trials=20)
anneal = run_sample_or_anneal(sa_cfg, "anneal")
print(f"{sample['oscillating']} oscillating weights: sampled loss mean {sample['mean']:.4f}, "
      f"best {sample['best']:.4f}; annealed {anneal['loss']:.4f}")
print("outputs in", root)
