"""Closed-form score mathematics for Gaussian corruption of embedded tokens.

Arrays are batched along leading axes: posteriors are ``(..., V)``, states and
embedding estimates are ``(..., d)`` and timesteps broadcast against the
leading shape. The embedding matrix is always ``(V, d)``.
"""

from __future__ import annotations

import dataclasses
from typing import Literal

import numpy as np

from .numerics import log_sum_exp, softmax

ScoreMode = Literal["plain", "renormalise", "clamp", "renormalise+clamp"]
SCORE_MODES = ("plain", "renormalise", "clamp", "renormalise+clamp")

_DEGENERATE_NORM = 1e-30


@dataclasses.dataclass
class OracleSpec:
    """Known token prior and fixed embeddings defining an exact Gaussian mixture."""

    prior: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.prior.ndim != 1 or self.prior.shape[0] != self.embeddings.shape[0]:
            raise ValueError("prior must have one entry per embedding row")
        if np.any(self.prior < 0) or abs(self.prior.sum() - 1.0) > 1e-10:
            raise ValueError("prior must be a probability vector")

    @property
    def vocab_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def _time(t, lead_ndim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("timestep must be positive")
    return t.reshape(t.shape + (1,) * (lead_ndim + 1 - t.ndim)) if t.ndim else t


def conditional_score(x0, x, t) -> np.ndarray:
    """Score of ``N(x; x0, t^2 I)`` with respect to ``x``: ``(x0 - x) / t^2``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    t = _time(t, x.ndim - 1)
    return (x0 - x) / t**2


def interpolate_x0(probs, embeddings) -> np.ndarray:
    return np.asarray(probs, dtype=np.float64) @ np.asarray(embeddings, dtype=np.float64)


def nearest_embedding(x, embeddings) -> np.ndarray:
    """Index of the Euclidean-nearest embedding row; ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    e = np.asarray(embeddings, dtype=np.float64)
    d2 = np.sum((x[..., None, :] - e) ** 2, axis=-1)
    return np.argmin(d2, axis=-1)


def clamp_x0(x0_hat, embeddings) -> np.ndarray:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    return embeddings[nearest_embedding(x0_hat, embeddings)]


def renormalise_x0(x0_hat) -> np.ndarray:
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    norm = np.linalg.norm(x0_hat, axis=-1, keepdims=True)
    if np.any(norm < _DEGENERATE_NORM):
        raise ValueError("cannot renormalise a zero embedding estimate (degenerate posterior)")
    return np.sqrt(x0_hat.shape[-1]) * x0_hat / norm


def shape_x0(x0_hat, embeddings, mode: ScoreMode) -> np.ndarray:
    if mode not in SCORE_MODES:
        raise ValueError(f"unknown score mode {mode!r}")
    if "clamp" in mode:
        x0_hat = clamp_x0(x0_hat, embeddings)
    if "renormalise" in mode:
        x0_hat = renormalise_x0(x0_hat)
    return x0_hat


def interpolate_score(probs, embeddings, x, t, mode: ScoreMode = "plain") -> np.ndarray:
    """Score estimate from a categorical prediction of the clean token.

    The conditional score is affine in the clean embedding, so its posterior
    expectation is the conditional score evaluated at the posterior mean
    embedding. ``mode`` optionally snaps that mean to the nearest embedding
    (clamp) and/or rescales it to norm ``sqrt(d)`` (renormalise); clamping
    happens first.
    """
    x0_hat = shape_x0(interpolate_x0(probs, embeddings), embeddings, mode)
    return conditional_score(x0_hat, x, t)


def bayes_log_posterior(spec: OracleSpec, x, t) -> np.ndarray:
    """Unnormalised log posterior ``log pi_i - |x - e_i|^2 / (2 t^2)``."""
    x = np.asarray(x, dtype=np.float64)
    t = _time(t, x.ndim - 1)
    d2 = np.sum((x[..., None, :] - spec.embeddings) ** 2, axis=-1)
    with np.errstate(divide="ignore"):
        log_prior = np.log(spec.prior)
    return log_prior - d2 / (2.0 * t**2)


def bayes_posterior(spec: OracleSpec, x, t) -> np.ndarray:
    logits = bayes_log_posterior(spec, x, t)
    return np.exp(logits - log_sum_exp(logits, axis=-1)[..., None])


def oracle_log_density(spec: OracleSpec, x, t) -> np.ndarray:
    """``log sum_i pi_i N(x; e_i, t^2 I)``."""
    x = np.asarray(x, dtype=np.float64)
    d = spec.dim
    tt = np.asarray(t, dtype=np.float64)
    return log_sum_exp(bayes_log_posterior(spec, x, t), axis=-1) - d * np.log(
        np.sqrt(2 * np.pi) * tt
    )


def oracle_score(spec: OracleSpec, x, t) -> np.ndarray:
    """Exact gradient of the mixture log density, written as a sum over components.

    Each component contributes ``-(x - e_i) / t^2`` weighted by its
    responsibility; responsibilities come from a log-space softmax so far-apart
    components at small ``t`` do not underflow to 0/0.
    """
    x = np.asarray(x, dtype=np.float64)
    tt = _time(t, x.ndim - 1)
    resp = softmax(bayes_log_posterior(spec, x, t), axis=-1)
    diffs = spec.embeddings - x[..., None, :]
    return np.einsum("...v,...vd->...d", resp, diffs) / tt**2


def cfg_combine(score_cond, score_uncond, gamma: float) -> np.ndarray:
    score_cond = np.asarray(score_cond, dtype=np.float64)
    score_uncond = np.asarray(score_uncond, dtype=np.float64)
    if gamma == 1.0:
        return score_cond.copy()
    if gamma == 0.0:
        return score_uncond.copy()
    return score_uncond + gamma * (score_cond - score_uncond)


def apply_score_temperature(score, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("score temperature must be positive")
    return np.asarray(score, dtype=np.float64) / temperature
