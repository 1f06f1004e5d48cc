"""
Oscillations corrupt batch-norm statistics
==========================================

One channel y = q(w_t) x feeds a batch-norm layer while w_t hops over a
decision threshold. The running statistics average over both levels, but
the deployed network uses only the last one. At 3 bits the two levels are far
apart, at 8 bits they almost coincide. Re-estimating the statistics with the
final weights removes the mismatch.
"""
import numpy as np

from oscqat.nets import Ctx, LayerSpec, build_model
from oscqat.normstats import StatsAccumulator, bn_reestimate, kl_drift, kl_summary, oscillation_drift_demo

print("KL drift of N(0,1) against N(0,2):", kl_drift(0.0, 1.0, 0.0, 2.0))

for label, kwargs in [("3 bits", {"bits": 3}), ("8 bits", {"bits": 8}), ("3 bits, frozen", {"bits": 3, "frozen": True})]:
    out = oscillation_drift_demo(seed=0, **kwargs)
    print(f"  {label:<15} drift {out['kl']:+.4f}  exact KL {out['exact_kl']:.4f}")

# The same thing inside a small network: corrupt the running estimates with
# a single training batch, then re-estimate over held data.
specs = [
    LayerSpec("conv", 1, 4, kernel=3),
    LayerSpec("bn"),
    LayerSpec("relu"),
    LayerSpec("depthwise-conv", 4, 4, kernel=3),
    LayerSpec("bn"),
    LayerSpec("relu"),
    LayerSpec("pool"),
    LayerSpec("linear", 4, 3),
]
model = build_model(specs, w_bits=3, seed=0)
rng = np.random.default_rng(1)
batches = [rng.uniform(0, 1, (16, 1, 8, 8)) for _ in range(4)]
model(batches[0] * 3.0, Ctx(bn="train"))


def population(model, batches):
    accs = None
    for xb in batches:
        captured = model.collect_bn_inputs(xb)
        accs = accs or [StatsAccumulator() for _ in captured]
        for a, h in zip(accs, captured):
            a.update(h)
    return [a.result() for a in accs]


for tag in ("before", "after"):
    if tag == "after":
        bn_reestimate(model, batches)
    for i, (pop, bn) in enumerate(zip(population(model, batches), model.batchnorms())):
        s = kl_summary(pop, bn.stats)
        print(f"  {tag} re-estimation, bn{i}: max drift {s['max']:+.3e}, exact {s['exact_max']:.3e}")
