"""Noise schedules and the localized-noise decay.

Builds a linear variance schedule, shows how the cumulative
signal-retention coefficients fall, and plots the step-function decay
lambda(t) that gates the masked noise injection.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from defectgen import MgniConfig, lambda_decay, make_linear_schedule, normalized_time

OUT = os.path.join(os.path.dirname(__file__), "output")
os.makedirs(OUT, exist_ok=True)

# a 50-step schedule with the conventional beta range
schedule = make_linear_schedule(50, 1e-4, 0.02)
print(f"steps: {schedule.num_steps}")
print(f"beta range: [{schedule.betas[0]:.2e}, {schedule.betas[-1]:.2e}]")
print(f"alpha_bar: {schedule.alpha_bars[0]:.4f} (clean end) -> "
      f"{schedule.alpha_bars[-1]:.4f} (noisy end)")

# normalized time runs from 1 (start of denoising) down to 0
times = [normalized_time(i, 50) for i in range(50)]
print(f"normalized time at index 49: {times[49]:.2f}, at index 0: {times[0]:.2f}")

# the decay is a hard gate: full strength above t_min, nothing below
cfg = MgniConfig(a=0.6, t_min=0.6)
print(f"lambda(0.8) = {lambda_decay(0.8, cfg)}  (early step, noise on)")
print(f"lambda(0.6) = {lambda_decay(0.6, cfg)}  (strictly above only)")
print(f"lambda(0.3) = {lambda_decay(0.3, cfg)}  (late step, noise off)")

fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
axes[0].plot(schedule.alpha_bars)
axes[0].set_xlabel("step index")
axes[0].set_title("signal retention (cumulative)")
grid = np.linspace(0, 1, 400)
axes[1].plot(grid, [lambda_decay(float(t), cfg) for t in grid])
axes[1].set_xlabel("normalized time t")
axes[1].set_title("decay a * 1[t > t_min]")
fig.tight_layout()
path = os.path.join(OUT, "schedule.png")
fig.savefig(path, dpi=120)
print(f"saved {path}")
