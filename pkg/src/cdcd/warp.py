"""Learned time warping with a monotone piecewise-linear CDF.

The warp lives on normalised time ``t' in [0, 1]``. Two logit vectors of
length ``N`` define bin widths on the input axis (softmax) and on the output
axis: softmax for the normalised CDF ``F``, plain ``exp`` for the unnormalised
curve ``F~`` that is regressed onto observed cross-entropy values. Both widths
get a small floor (``min_bin``) before renormalising so every slope is
positive and finite.

:class:`WarpCdf` holds the trainable logits, their EMA shadow and optimiser
state. Evaluation goes through an immutable :class:`WarpView` of widths;
temperature and uniformity manipulations produce new views.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Union

import numpy as np
from scipy.special import betainc
from scipy.stats import beta as beta_dist

from .numerics import ema_update, softmax
from .optim import AdamConfig, AdamState, adam_step

_F_FLOOR = 1e-6


def normalize_time(t, t_min: float, t_max: float):
    if not t_max > t_min:
        raise ValueError(f"need t_max > t_min, got {t_min}, {t_max}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < t_min) or np.any(t > t_max):
        raise ValueError(f"timestep outside [{t_min}, {t_max}]")
    out = (t - t_min) / (t_max - t_min)
    return float(out) if out.ndim == 0 else out


def floored_softmax(logits: np.ndarray, min_bin: float) -> np.ndarray:
    n = logits.shape[-1]
    return (softmax(logits) + min_bin) / (1.0 + n * min_bin)


def _edges(widths: np.ndarray, close: bool) -> np.ndarray:
    edges = np.concatenate([[0.0], np.cumsum(widths)])
    if close:
        edges[-1] = 1.0
    return edges


def _piecewise(x, in_edges, in_widths, out_edges, out_widths):
    """Interpolate ``x`` over bins; returns value, bin index and in-bin fraction."""
    idx = np.clip(np.searchsorted(in_edges, x, side="right") - 1, 0, in_widths.size - 1)
    offset = x - in_edges[idx]
    value = out_edges[idx] + offset * (out_widths[idx] / in_widths[idx])
    return value, idx, offset / in_widths[idx]


def _check_unit(x, name="t'"):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0) or np.any(x > 1.0) or np.any(~np.isfinite(x)):
        raise ValueError(f"{name} must lie in [0, 1]")
    return x


def _out(v):
    return float(v) if np.ndim(v) == 0 else v


@dataclasses.dataclass(frozen=True)
class WarpView:
    """Bin widths defining one fixed warping function."""

    input_widths: np.ndarray
    output_widths: np.ndarray
    t_min: float
    t_max: float
    unnormalised_widths: Optional[np.ndarray] = None

    @property
    def n_bins(self) -> int:
        return self.input_widths.size

    def with_output_widths(self, output_widths: np.ndarray) -> "WarpView":
        return dataclasses.replace(self, output_widths=output_widths, unnormalised_widths=None)


@dataclasses.dataclass
class WarpCdf:
    input_logits: np.ndarray
    output_logits: np.ndarray
    t_min: float
    t_max: float
    min_bin: float = 1e-4
    ema_decay: Optional[float] = 0.99
    ema_input_logits: Optional[np.ndarray] = None
    ema_output_logits: Optional[np.ndarray] = None
    optimizer: AdamConfig = dataclasses.field(default_factory=AdamConfig)
    adam: AdamState = dataclasses.field(default_factory=AdamState)

    def __post_init__(self):
        self.input_logits = np.array(self.input_logits, dtype=np.float64)
        self.output_logits = np.array(self.output_logits, dtype=np.float64)
        if self.input_logits.shape != self.output_logits.shape or self.input_logits.ndim != 1:
            raise ValueError("input and output logits must be 1-d with equal length")
        if not self.t_max > self.t_min > 0:
            raise ValueError("need t_max > t_min > 0")
        if self.ema_input_logits is None:
            self.ema_input_logits = self.input_logits.copy()
        if self.ema_output_logits is None:
            self.ema_output_logits = self.output_logits.copy()

    @classmethod
    def identity(cls, n_bins: int, t_min: float, t_max: float, **kwargs) -> "WarpCdf":
        """Both logit sets at ``-log N``: ``F`` is the identity and ``F~ == F``."""
        logits = np.full(n_bins, -math.log(n_bins))
        return cls(logits, logits.copy(), t_min, t_max, **kwargs)

    @property
    def n_bins(self) -> int:
        return self.input_logits.size

    def view(self, ema: bool = True) -> WarpView:
        use_ema = ema and self.ema_decay is not None
        lt = self.ema_input_logits if use_ema else self.input_logits
        lu = self.ema_output_logits if use_ema else self.output_logits
        return WarpView(
            input_widths=floored_softmax(lt, self.min_bin),
            output_widths=floored_softmax(lu, self.min_bin),
            t_min=self.t_min,
            t_max=self.t_max,
            unnormalised_widths=np.exp(lu),
        )

    def params(self) -> dict:
        return {"input_logits": self.input_logits, "output_logits": self.output_logits}


WarpLike = Union[WarpCdf, WarpView]


def as_view(w: WarpLike) -> WarpView:
    return w.view() if isinstance(w, WarpCdf) else w


def eval_cdf(w: WarpLike, tp, normalized: bool = True):
    """``F(t')`` (or ``F~(t')`` when ``normalized`` is false)."""
    v = as_view(w)
    tp = _check_unit(tp)
    if normalized:
        val, _, _ = _piecewise(tp, _edges(v.input_widths, True), v.input_widths,
                               _edges(v.output_widths, True), v.output_widths)
        val = np.where(tp >= 1.0, 1.0, val)
    else:
        if v.unnormalised_widths is None:
            raise ValueError("this view has no unnormalised output widths")
        val, _, _ = _piecewise(tp, _edges(v.input_widths, True), v.input_widths,
                               _edges(v.unnormalised_widths, False), v.unnormalised_widths)
    return _out(val)


def invert_cdf(w: WarpLike, u):
    """``F^{-1}(u)``: the same interpolation with input and output roles swapped."""
    v = as_view(w)
    u = _check_unit(u, "u")
    val, _, _ = _piecewise(u, _edges(v.output_widths, True), v.output_widths,
                           _edges(v.input_widths, True), v.input_widths)
    return _out(np.where(u >= 1.0, 1.0, val))


def pdf(w: WarpLike, tp):
    v = as_view(w)
    tp = _check_unit(tp)
    idx = np.clip(np.searchsorted(_edges(v.input_widths, True), tp, side="right") - 1, 0, v.n_bins - 1)
    return _out(v.output_widths[idx] / v.input_widths[idx])


def importance_weight(w: WarpLike, tp):
    """Reciprocal warp density; a plain array, never part of any gradient."""
    v = as_view(w)
    tp = _check_unit(tp)
    idx = np.clip(np.searchsorted(_edges(v.input_widths, True), tp, side="right") - 1, 0, v.n_bins - 1)
    return _out(v.input_widths[idx] / v.output_widths[idx])


def sample_timestep(w: WarpLike, u):
    """Map uniform ``u`` to a timestep in ``[t_min, t_max]`` through the inverse CDF."""
    v = as_view(w)
    tp = np.asarray(invert_cdf(v, u))
    return _out(v.t_min + (v.t_max - v.t_min) * tp)


def warp_temperature(w: WarpLike, temperature: float) -> WarpView:
    """Raise the warp density to ``1/T`` (up to normalisation)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    v = as_view(w)
    if temperature == 1.0:
        return v.with_output_widths(v.output_widths.copy())
    ratio = v.output_widths / v.input_widths
    new = v.output_widths * ratio ** (1.0 / temperature - 1.0)
    return v.with_output_widths(new / new.sum())


def warp_uniformity(w: WarpLike, mu: float) -> WarpView:
    """Mix the warp density with the uniform density using weight ``mu``."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    v = as_view(w)
    if mu == 0.0:
        return v.with_output_widths(v.output_widths.copy())
    if mu == 1.0:
        return v.with_output_widths(v.input_widths.copy())
    return v.with_output_widths((1.0 - mu) * v.output_widths + mu * v.input_widths)


def manipulate(w: WarpLike, temperature: float = 1.0, uniformity: float = 0.0) -> WarpView:
    v = as_view(w)
    if temperature != 1.0:
        v = warp_temperature(v, temperature)
    if uniformity != 0.0:
        v = warp_uniformity(v, uniformity)
    return v


def beta_shape(u, alpha: float, beta: float):
    """Beta CDF target shape and its derivative."""
    u = np.clip(u, 0.0, 1.0)
    # keep the density finite at the edges when alpha or beta < 1
    return betainc(alpha, beta, u), beta_dist.pdf(np.clip(u, _F_FLOOR, 1.0 - _F_FLOOR), alpha, beta)


@dataclasses.dataclass
class FitStats:
    objective: float
    n_used: int
    n_dropped: int


def fit_objective(
    input_logits: np.ndarray,
    output_logits: np.ndarray,
    tps: np.ndarray,
    losses: np.ndarray,
    weights: np.ndarray,
    min_bin: float,
    shape: Optional[tuple] = None,
) -> tuple:
    """Importance-weighted MSE between the warp curve and observed losses.

    The curve is ``F~(t')``, or ``S(F(t')) F~(t') / F(t')`` for a Beta-CDF
    target shape ``S``. Returns ``(objective, grad_input_logits,
    grad_output_logits)`` with gradients derived by hand.
    """
    n = input_logits.size
    b = tps.size
    st = softmax(input_logits)
    su = softmax(output_logits)
    scale = 1.0 / (1.0 + n * min_bin)
    wt = (st + min_bin) * scale
    wu = (su + min_bin) * scale
    wr = np.exp(output_logits)

    et = _edges(wt, True)
    idx = np.clip(np.searchsorted(et, tps, side="right") - 1, 0, n - 1)
    r = (tps - et[idx]) / wt[idx]
    cols = np.arange(n)
    a = (cols[None, :] < idx[:, None]).astype(np.float64)
    a[np.arange(b), idx] = r

    f_raw = np.cumsum(np.concatenate([[0.0], wr]))[idx] + r * wr[idx]
    if shape is None:
        curve = f_raw
        d_raw = np.ones(b)
        d_norm = None
    else:
        f = _edges(wu, False)[idx] + r * wu[idx]
        fc = np.maximum(f, _F_FLOOR)
        s, ds = beta_shape(f, *shape)
        curve = s * f_raw / fc
        d_raw = s / fc
        d_norm = ds * f_raw / fc - (f > _F_FLOOR) * s * f_raw / fc**2

    resid = curve - losses
    objective = float(np.mean(weights * resid**2))
    gamma = 2.0 * weights * resid / b

    g_wr = (gamma * d_raw) @ a
    g_wt_per = gamma * d_raw * (-wr[idx] / wt[idx])
    g_wu = np.zeros(n)
    if d_norm is not None:
        g_wu = (gamma * d_norm) @ a
        g_wt_per = g_wt_per + gamma * d_norm * (-wu[idx] / wt[idx])
    g_wt = g_wt_per @ a

    def through_softmax(g_w, s):
        g_s = g_w * scale
        return s * (g_s - np.dot(g_s, s))

    grad_lt = through_softmax(g_wt, st)
    grad_lu = g_wr * wr + through_softmax(g_wu, su)
    return objective, grad_lt, grad_lu


def fit_step(
    w: WarpCdf,
    ts,
    losses,
    weights=None,
    shape: Optional[tuple] = None,
) -> FitStats:
    """One Adam step of ``F~`` towards per-sequence losses, then the EMA update.

    ``ts`` are raw timesteps in ``[t_min, t_max]``. Non-finite losses are
    dropped and counted. An empty batch leaves ``w`` untouched.
    """
    ts = np.asarray(ts, dtype=np.float64).reshape(-1)
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    weights = np.ones_like(ts) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if not ts.size == losses.size == weights.size:
        raise ValueError("ts, losses and weights must have equal lengths")
    keep = np.isfinite(losses)
    n_dropped = int((~keep).sum())
    ts, losses, weights = ts[keep], losses[keep], weights[keep]
    if ts.size == 0:
        return FitStats(float("nan"), 0, n_dropped)
    tps = np.asarray(normalize_time(ts, w.t_min, w.t_max)).reshape(-1)
    objective, g_lt, g_lu = fit_objective(
        w.input_logits, w.output_logits, tps, losses, weights, w.min_bin, shape
    )
    adam_step(w.params(), {"input_logits": g_lt, "output_logits": g_lu}, w.adam, w.optimizer)
    if w.ema_decay is not None:
        w.ema_input_logits = ema_update(w.ema_input_logits, w.input_logits, w.ema_decay)
        w.ema_output_logits = ema_update(w.ema_output_logits, w.output_logits, w.ema_decay)
    else:
        w.ema_input_logits = w.input_logits.copy()
        w.ema_output_logits = w.output_logits.copy()
    return FitStats(objective, int(ts.size), n_dropped)
