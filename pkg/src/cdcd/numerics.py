"""Random streams, stable elementary numerics and a finite-difference gradient checker."""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Mapping

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1
_TWO_M53 = 2.0**-53


@dataclasses.dataclass
class RngStream:
    """Counter-based random stream backed by the Philox-4x64 block cipher.

    The Philox key is ``(seed, stream_id)``; ``counter`` counts raw 64-bit words
    consumed so far. Every derived draw (uniform, gaussian, integer) consumes
    exactly one raw word per output value, so a call producing ``k`` values
    advances ``counter`` by ``k``. Copies are independent snapshots.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def raw(self, n: int) -> np.ndarray:
        block, offset = divmod(self.counter, 4)
        bitgen = np.random.Philox(key=[self.seed & _MASK64, self.stream_id & _MASK64], counter=block)
        out = bitgen.random_raw(offset + n)[offset:] if n > 0 else np.zeros(0, dtype=np.uint64)
        self.counter += n
        return out

    def split(self, stream_id: int) -> "RngStream":
        """A fresh stream sharing the seed, keyed by ``stream_id``."""
        return RngStream(self.seed, stream_id, 0)

    def state(self) -> dict:
        return {"seed": self.seed, "stream_id": self.stream_id, "counter": self.counter}


def uniform(rng: RngStream, shape) -> np.ndarray:
    """Uniforms on [0, 1) with 53 random bits each."""
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    n = int(np.prod(shape, dtype=np.int64))
    return ((rng.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53).reshape(shape)


def integers(rng: RngStream, high: int, shape) -> np.ndarray:
    """Integers uniform on ``{0, ..., high - 1}``."""
    return np.minimum((uniform(rng, shape) * high).astype(np.int64), high - 1)


def gaussian(rng: RngStream, shape) -> np.ndarray:
    """Standard normal draws by inverse-CDF transform, one raw word per value."""
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    if any(s <= 0 for s in shape):
        raise ValueError(f"shape entries must be positive, got {shape}")
    n = int(np.prod(shape, dtype=np.int64))
    u = ((rng.raw(n) >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53
    return ndtri(u).reshape(shape)


def log_sum_exp(v, axis=None) -> np.ndarray | float:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    vmax = np.max(v, axis=axis, keepdims=True)
    vmax = np.where(np.isfinite(vmax), vmax, 0.0)
    out = np.log(np.sum(np.exp(v - vmax), axis=axis, keepdims=True)) + vmax
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax(logits, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def low_discrepancy_uniforms(rng: RngStream, batch: int) -> np.ndarray:
    """Stratified uniforms ``((i + u0) / B) mod 1`` sharing one random offset ``u0``."""
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    u0 = float(uniform(rng, (1,))[0])
    return stratified_grid(u0, batch)


def stratified_grid(u0: float, batch: int) -> np.ndarray:
    return np.mod((np.arange(batch, dtype=np.float64) + u0) / batch, 1.0)


def ema_update(current, target, decay: float) -> np.ndarray:
    current = np.asarray(current, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if current.shape != target.shape:
        raise ValueError(f"shape mismatch {current.shape} vs {target.shape}")
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must lie in [0, 1), got {decay}")
    return decay * current + (1.0 - decay) * target


@dataclasses.dataclass
class GradCheckReport:
    parameter_name: str
    max_rel_err: float
    worst_index: int


def finite_diff_check(
    params: Mapping[str, np.ndarray],
    loss: Callable[[], float],
    grads: Mapping[str, np.ndarray],
    eps: float | Mapping[str, float] = 1e-5,
    order: int = 2,
) -> list[GradCheckReport]:
    """Compare analytic gradients against central differences, entry by entry.

    ``params`` maps names to float64 arrays that ``loss`` reads by reference;
    each entry is perturbed in place and restored. ``eps`` may be a mapping
    from parameter name to step for tensors on very different scales. ``order=4`` uses the
    five-point stencil, which tolerates a larger ``eps`` before truncation
    error shows up.

    The per-entry error is ``|g_fd - g| / max(|g_fd|, |g|, 1e-12)``; a
    non-finite loss at any perturbation reports ``inf`` for that parameter.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    reports = []
    for name, p in params.items():
        h = eps[name] if isinstance(eps, Mapping) else eps
        if h <= 0:
            raise ValueError("eps must be positive")
        g = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ValueError(f"parameter {name!r} must be reshapeable without a copy")
        worst, worst_idx = 0.0, -1
        for i in range(flat.size):
            orig = flat[i]
            if order == 2:
                offsets, coefs = (h, -h), (0.5, -0.5)
            else:
                offsets = (2 * h, h, -h, -2 * h)
                coefs = (-1.0 / 12, 8.0 / 12, -8.0 / 12, 1.0 / 12)
            values = []
            for off in offsets:
                flat[i] = orig + off
                values.append(float(loss()))
            flat[i] = orig
            if not all(math.isfinite(v) for v in values):
                worst, worst_idx = math.inf, i
                break
            g_fd = sum(c * v for c, v in zip(coefs, values)) / h
            err = abs(g_fd - g[i]) / max(abs(g_fd), abs(g[i]), 1e-12)
            if err > worst or worst_idx < 0:
                worst, worst_idx = err, i
        reports.append(GradCheckReport(name, worst, max(worst_idx, 0)))
    return reports
