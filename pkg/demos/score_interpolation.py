"""
Score interpolation on a two-token mixture
==========================================

A categorical posterior over embeddings turns into a score estimate. With the
exact Bayes posterior the estimate equals the analytic score of the noised
Gaussian mixture, which this demo checks on a grid.
"""

# %%
import numpy as np

from cdcd.score import OracleSpec, bayes_posterior, interpolate_score, oracle_score

emb = np.array([[1.0, 0.0], [-1.0, 0.0]])
spec = OracleSpec(np.array([0.5, 0.5]), emb)

# %%
# Along the axis between the two embeddings the score points back toward the
# nearer one; at large noise it shrinks like -x / t^2.
print(f"{'x':>6} {'t':>6} {'p(token 0)':>11} {'interpolated':>13} {'analytic':>10}")
for t in (0.3, 1.0, 5.0):
    for x0 in (-1.5, -0.5, 0.0, 0.5, 1.5):
        x = np.array([x0, 0.0])
        post = bayes_posterior(spec, x, t)
        s = interpolate_score(post, emb, x, t)
        print(f"{x0:6.2f} {t:6.2f} {post[0]:11.4f} {s[0]:13.6f} {oracle_score(spec, x, t)[0]:10.6f}")

# %%
# Clamping snaps the predicted clean embedding to its nearest token, which
# sharpens the field once one token dominates.
x = np.array([0.2, 0.0])
post = bayes_posterior(spec, x, 1.0)
for mode in ("plain", "renormalise", "clamp"):
    print(mode, interpolate_score(post, emb, x, 1.0, mode))
