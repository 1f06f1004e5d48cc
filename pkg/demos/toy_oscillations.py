"""
Oscillations in a one-weight regression
=======================================

A single latent weight is trained with STE to hit a target w* that sits
between two grid points. The quantized weight can never reach w*, so the
latent weight keeps hopping over the decision threshold. This script walks
through how often that happens and what changes it.

Run with ``python demos/toy_oscillations.py``.
"""
import numpy as np

from oscqat.quant import EstimatorKind
from oscqat.toylab import (
    ToyProblem,
    compare_estimators,
    critical_dampening,
    fit_line,
    frequency_sweep,
    lr_sweep,
    measure_amplitude,
    measure_frequency,
    simulate_trajectory,
)

# grid step s = 1, levels -4..3; w* = 0.8 lies 0.2 below the upper level
problem = ToyProblem(w_star=0.8, scale=1.0, lr=0.2, steps=400)
traj = simulate_trajectory(problem)
print("last 12 integer values:", traj.w_int[-12:].tolist())
print("latent weight, last 6 steps:", np.round(traj.latent[-6:], 3).tolist())

# The weight spends a fraction d/s of its time at the lower level, so it flips
# about that often. Measured over 4000 steps for each distance:
rows = frequency_sweep([0.05, 0.1, 0.2, 0.3, 0.4, 0.5])
for ratio, freq in rows:
    print(f"  d/s = {ratio:.2f}  frequency = {freq:.4f}")
slope, intercept = fit_line(*zip(*rows))
print(f"least-squares fit: slope {slope:.3f}, intercept {intercept:+.4f}")

# The learning rate sets the amplitude, not the frequency.
for lr, amp, freq in lr_sweep((0.4, 0.2, 0.1, 0.05)):
    print(f"  lr = {lr:<5} amplitude = {amp:.4f}  frequency = {freq:.4f}")

# Rescaling the STE gradient (EWGS, DSQ) cannot turn the weight around, since
# the sign of the update never changes. An additive pull to the bin centre can.
base = ToyProblem()
lam = 1.5 * critical_dampening(base)
print(f"critical dampening weight {critical_dampening(base):.3f}, using {lam:.3f}")
start = int(0.8 * base.steps)
for name, t in compare_estimators(base, dampen=lam).items():
    amp, moving = measure_amplitude(t.latent, burn_in=start)
    print(f"  {name:<7} flips in last 20%: {t.changes_after(start):4d}  "
          f"frequency {measure_frequency(t.w_int, burn_in=start):.3f}  amplitude {amp:.3f}")

# EWGS with a large delta still oscillates, just with a different step size
ewgs = simulate_trajectory(ToyProblem(estimator=EstimatorKind.ewgs(0.5)))
print("ewgs(0.5) flips in last 20%:", ewgs.changes_after(start))
