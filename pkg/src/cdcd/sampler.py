"""Deterministic probability-flow ODE sampling with Euler and Heun solvers.

With zero drift and ``g(t) = sqrt(2t)`` the ODE reads ``dx/dt = -t * score``.
A denoiser is any callable ``denoiser(x, c, m, p, t) -> logits`` on numpy
arrays shaped ``(B, L, d)`` (``m`` is ``(B, L)``, ``t`` is ``(B,)``) returning
``(B, L, V)`` logits; the learned Transformer and the exact oracle both fit.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Optional

import numpy as np

from .numerics import RngStream, gaussian, softmax
from .score import (
    SCORE_MODES,
    apply_score_temperature,
    cfg_combine,
    interpolate_score,
    interpolate_x0,
    nearest_embedding,
)
from .warp import WarpLike, as_view, invert_cdf, manipulate, normalize_time, sample_timestep

Denoiser = Callable[..., np.ndarray]
ScoreField = Callable[[np.ndarray, float], np.ndarray]


@dataclasses.dataclass
class SamplerConfig:
    solver: str = "euler"
    n_steps: int = 200
    spacing: str = "warped"
    rho: float = 7.0
    sigma_init: float = 1.0
    score_temp: float = 1.0
    softmax_temp: float = 1.0
    nucleus_p: float = 1.0
    guidance: float = 1.0
    mode: str = "plain"
    decode: str = "argmax"
    self_condition: bool = True
    # feed the truncated posterior (instead of the raw one) back as self-conditioning
    truncate_self_cond: bool = False
    warp_temperature: float = 1.0
    warp_uniformity: float = 0.0

    def __post_init__(self):
        if self.solver not in ("euler", "heun"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.spacing not in ("warped", "rho", "warped_rho"):
            raise ValueError(f"unknown spacing {self.spacing!r}")
        if self.decode not in ("argmax", "nearest_embedding"):
            raise ValueError(f"unknown decode {self.decode!r}")
        if self.mode not in SCORE_MODES:
            raise ValueError(f"unknown score mode {self.mode!r}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0.0 < self.sigma_init <= 1.0:
            raise ValueError("sigma_init must lie in (0, 1]")
        if not 0.0 < self.nucleus_p <= 1.0:
            raise ValueError("nucleus_p must lie in (0, 1]")
        if self.score_temp <= 0 or self.softmax_temp <= 0 or self.rho <= 0:
            raise ValueError("temperatures and rho must be positive")


@dataclasses.dataclass
class Trajectory:
    timesteps: np.ndarray
    states: Optional[list] = None


@dataclasses.dataclass
class SampleResult:
    tokens: np.ndarray
    trajectory: Trajectory
    final_state: np.ndarray


def rho_grid(n_steps: int, t_min: float, t_max: float, rho: float) -> np.ndarray:
    k = np.arange(n_steps + 1) / n_steps
    hi, lo = t_max ** (1.0 / rho), t_min ** (1.0 / rho)
    grid = (hi + k * (lo - hi)) ** rho
    grid[0], grid[-1] = t_max, t_min
    return grid


def step_grid(cfg: SamplerConfig, warp: Optional[WarpLike], t_min: float, t_max: float) -> np.ndarray:
    """Descending timesteps ``t_0 = t_max > ... > t_N = t_min``.

    Without a warp the ``warped`` grid is linear in ``t``.
    """
    n = cfg.n_steps
    if cfg.spacing == "rho":
        return rho_grid(n, t_min, t_max, cfg.rho)
    view = None
    if warp is not None:
        view = manipulate(warp, cfg.warp_temperature, cfg.warp_uniformity)
    if cfg.spacing == "warped":
        u = 1.0 - np.arange(n + 1) / n
    else:
        u = np.clip(normalize_time(rho_grid(n, t_min, t_max, cfg.rho), t_min, t_max), 0.0, 1.0)
    if view is None:
        grid = t_min + (t_max - t_min) * u
    else:
        grid = t_min + (t_max - t_min) * np.asarray(invert_cdf(view, u))
    grid[0], grid[-1] = t_max, t_min
    return grid


def euler_step(x, t, t_next, score: ScoreField) -> np.ndarray:
    d1 = -t * score(x, t)
    return x + (t_next - t) * d1


def heun_step(x, t, t_next, score: ScoreField) -> np.ndarray:
    """Second-order step: Euler predictor, trapezoidal corrector.

    The corrector is applied on every interval, including the last one ending
    at ``t_min`` (which is positive, so the score is defined there).
    """
    dt = t_next - t
    d1 = -t * score(x, t)
    x_pred = x + dt * d1
    d2 = -t_next * score(x_pred, t_next)
    return x + dt * 0.5 * (d1 + d2)


def integrate(x, grid, score: ScoreField, solver: str = "euler", record: bool = False):
    """Run the solver across ``grid``; returns the final state and optional history."""
    step = euler_step if solver == "euler" else heun_step
    states = [x.copy()] if record else None
    for k in range(len(grid) - 1):
        x = step(x, float(grid[k]), float(grid[k + 1]), score)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite sampler state at step {k}")
        if record:
            states.append(x.copy())
    return x, states


def truncate_posterior(probs, softmax_temp: float = 1.0, nucleus_p: float = 1.0) -> np.ndarray:
    """Temperature-scale then nucleus-truncate a categorical posterior.

    Tokens outside the smallest top set with mass ``>= nucleus_p`` are zeroed;
    ties in probability are ordered by token index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if softmax_temp != 1.0:
        with np.errstate(divide="ignore"):
            probs = softmax(np.log(probs) / softmax_temp, axis=-1)
    if nucleus_p >= 1.0:
        return probs
    v = probs.shape[-1]
    flat = probs.reshape(-1, v)
    order = np.argsort(-flat, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(flat, order, axis=-1)
    before = np.cumsum(sorted_p, axis=-1) - sorted_p
    keep_sorted = before < nucleus_p - 1e-12
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=-1)
    out = np.where(keep, flat, 0.0)
    out /= out.sum(axis=-1, keepdims=True)
    return out.reshape(probs.shape)


def sample(
    denoiser: Denoiser,
    embeddings: np.ndarray,
    cfg: SamplerConfig,
    rng: RngStream,
    *,
    batch: Optional[int] = None,
    length: Optional[int] = None,
    warp: Optional[WarpLike] = None,
    t_min: Optional[float] = None,
    t_max: Optional[float] = None,
    cond_tokens: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
    record: bool = False,
) -> SampleResult:
    """Generate token sequences by integrating the probability-flow ODE.

    ``mask`` marks positions to generate (``True``) versus given ones whose
    tokens come from ``cond_tokens``; without a mask everything is generated.
    Given positions keep their clean embeddings for the whole trajectory.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    d = embeddings.shape[1]
    if warp is not None:
        view = as_view(warp)
        t_min = view.t_min if t_min is None else t_min
        t_max = view.t_max if t_max is None else t_max
    if t_min is None or t_max is None:
        raise ValueError("t_min and t_max are required without a warp")
    if mask is None:
        if batch is None or length is None:
            raise ValueError("batch and length are required without a mask")
        mask = np.ones((batch, length), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    b, l = mask.shape
    if cond_tokens is None:
        if not mask.all():
            raise ValueError("cond_tokens are required when some positions are given")
        cond_tokens = np.zeros((b, l), dtype=np.int64)
    cond_tokens = np.asarray(cond_tokens, dtype=np.int64)

    mf = mask[..., None].astype(np.float64)
    clean = embeddings[cond_tokens] * (1.0 - mf)
    grid = step_grid(cfg, warp, t_min, t_max)
    eps = gaussian(rng, (b, l, d))
    x = clean + mf * (cfg.sigma_init * grid[0]) * eps

    ones = np.ones_like(mf[..., 0])
    zeros_c = np.zeros_like(clean)
    state = {"p": np.zeros_like(clean)}

    def posterior(xs, t, c, m, p):
        logits = denoiser(xs * mf, c, m, p, np.full(b, t))
        return softmax(logits, axis=-1)

    def score(xs, t):
        probs = posterior(xs, t, clean, mask.astype(np.float64), state["p"])
        trunc = truncate_posterior(probs, cfg.softmax_temp, cfg.nucleus_p)
        s = interpolate_score(trunc, embeddings, xs, t, cfg.mode)
        if cfg.guidance != 1.0:
            probs_u = posterior(xs, t, zeros_c, ones, state["p"])
            trunc_u = truncate_posterior(probs_u, cfg.softmax_temp, cfg.nucleus_p)
            s = cfg_combine(s, interpolate_score(trunc_u, embeddings, xs, t, cfg.mode), cfg.guidance)
        if cfg.self_condition:
            src = trunc if cfg.truncate_self_cond else probs
            state["p"] = interpolate_x0(src, embeddings) * mf
        return apply_score_temperature(s, cfg.score_temp) * mf

    x, states = integrate(x, grid, score, cfg.solver, record)

    if cfg.decode == "argmax":
        probs = posterior(x, float(grid[-1]), clean, mask.astype(np.float64), state["p"])
        generated = np.argmax(probs, axis=-1)
    else:
        generated = nearest_embedding(x, embeddings)
    tokens = np.where(mask, generated, cond_tokens)
    return SampleResult(tokens, Trajectory(grid, states), x)
