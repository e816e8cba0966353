"""
Euler and Heun on the exact probability-flow ODE
================================================

With the Gaussian-mixture oracle the score is known in closed form, so the
global error of each solver can be measured against a very fine reference run.
"""

# %%
import numpy as np

from cdcd.evaluation import convergence_study
from cdcd.numerics import RngStream, gaussian
from cdcd.score import OracleSpec

raw = gaussian(RngStream(3, 0), (6, 3))
spec = OracleSpec(np.full(6, 1 / 6), np.sqrt(3) * raw / np.linalg.norm(raw, axis=1, keepdims=True))

# %%
for solver in ("euler", "heun"):
    res = convergence_study(spec, solver=solver)
    print(solver)
    for n, err in zip(res.n_steps, res.errors):
        print(f"  N = {n:3d}   RMS endpoint error {err:.3e}")
    print(f"  fitted order {res.slope:.2f}")
