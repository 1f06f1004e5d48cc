"""
Tracking oscillations and freezing weights
==========================================

Every weight carries an exponential moving average f of its oscillation
events (integer changes that reverse the previous change). Freezing fixes a
weight once f passes a threshold.
"""
import numpy as np

from oscqat.optim import CosineSchedule
from oscqat.oscillation import (
    FreezeConfig,
    OscillationTracker,
    freeze_step,
    oscillating_fraction,
    track_step,
)

# Hand trace: integers 2 -> 3 -> 2 with momentum 0.1.
t = OscillationTracker.init(np.array([2]), momentum=0.1)
for v in (3, 2):
    track_step(t, np.array([v]))
    print(f"after {v}: f = {t.f[0]}")

# A square wave flips every step, so f follows 1 - (1 - m)^T.
m = 0.1
t = OscillationTracker.init(np.array([0]), momentum=m)
for step in range(1, 31):
    track_step(t, np.array([step % 2]))
print(f"square wave, T=30: f = {t.f[0]:.12f}, closed form {1 - (1 - m) ** 30:.12f}")

# A population: a third of the weights hop between two levels at random,
# the rest drift slowly. Freezing picks out the hoppers. A drifter's first move
# also counts as an event, so drifters show up briefly in the oscillating share.
rng = np.random.default_rng(0)
n = 300
hopper = np.arange(n) < n // 3
drift = np.zeros(n, dtype=int)
t = OscillationTracker.init(drift.copy(), momentum=0.05)
freeze = FreezeConfig(CosineSchedule(0.2, 0.1, 400), momentum=0.05)
for step in range(400):
    drift += (rng.random(n) < 0.01)
    w_int = np.where(hopper, rng.integers(0, 2, n), drift)
    w_int = np.where(t.frozen, t.frozen_int, w_int)
    track_step(t, w_int)
    freeze_step(t, freeze, step=step)
    if step % 100 == 99:
        print(f"step {step + 1}: oscillating {oscillating_fraction(t):.3f}, "
              f"frozen {t.frozen.mean():.3f} (hoppers frozen {t.frozen[hopper].mean():.2f}, "
              f"others {t.frozen[~hopper].mean():.2f})")

# Frozen weights sit at the rounded average of their recent integers.
print("frozen values of the first 10 hoppers:", t.frozen_int[:10].tolist())
