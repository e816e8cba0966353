"""
Fitting a time warp to a loss curve
===================================

The warp is a monotone piecewise-linear map from normalised noise level to an
unnormalised cumulative loss. Fitting it to per-example losses and sampling
through its inverse spends training effort where the loss changes fastest.
"""

# %%
import numpy as np

from cdcd.numerics import RngStream, uniform
from cdcd.optim import AdamConfig
from cdcd.warp import WarpCdf, eval_cdf, fit_step, importance_weight, invert_cdf, warp_temperature

# a sigmoid-shaped loss in normalised time, the usual look of a diffusion CE curve
def loss(tp):
    return 1.4 / (1.0 + np.exp(-12.0 * (tp - 0.3)))

w = WarpCdf.identity(20, 0.1, 300.0, optimizer=AdamConfig(lr=1e-2))
rng = RngStream(0, 0)
for step in range(2000):
    tp = uniform(rng, (64,))
    stats = fit_step(w, 0.1 + 299.9 * tp, loss(tp))
    if step % 500 == 0:
        print(f"step {step:5d}  objective {stats.objective:.5f}")

# %%
# The normalised warp tracks the normalised loss curve.
grid = np.linspace(0, 1, 11)
target = (loss(grid) - loss(0.0)) / (loss(1.0) - loss(0.0))
for tp, f, g in zip(grid, eval_cdf(w, grid), target):
    print(f"t' = {tp:.1f}   F = {f:.3f}   normalised loss = {g:.3f}")

# %%
# Sampling through the inverse concentrates timesteps near the steep part;
# importance weights undo the bias in expectations.
u = uniform(RngStream(0, 1), (100000,))
tp = invert_cdf(w, u)
print("fraction of draws in [0.2, 0.4]:", np.mean((tp > 0.2) & (tp < 0.4)))
vals = importance_weight(w, tp) * tp**2
print(f"weighted mean of t'^2: {vals.mean():.4f} +/- {vals.std(ddof=1) / np.sqrt(vals.size):.4f} (uniform value 1/3)")
# the flat tail of the warp has tiny density, so its weights are large and the estimate is noisy

# %%
# A temperature above one flattens the sampling density toward uniform.
for temp in (0.5, 1.0, 2.0):
    v = warp_temperature(w, temp)
    print(f"T = {temp}: fraction in [0.2, 0.4] = {np.mean((invert_cdf(v, u) > 0.2) & (invert_cdf(v, u) < 0.4)):.3f}")
