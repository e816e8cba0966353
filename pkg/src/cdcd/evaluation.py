"""Desk-scale metrics with exact ground truth from synthetic token sources."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from typing import Optional, Sequence

import numpy as np
import torch

from .embedding import Vocabulary
from .numerics import RngStream, gaussian, uniform
from .sampler import integrate, rho_grid
from .score import OracleSpec, oracle_score


@dataclasses.dataclass
class SyntheticSource:
    """I.i.d. tokens from ``probs`` or a Markov chain ``transition`` started at ``initial``.

    A Markov source without ``initial`` starts from its stationary distribution.
    """

    kind: str
    probs: Optional[np.ndarray] = None
    transition: Optional[np.ndarray] = None
    initial: Optional[np.ndarray] = None
    vocab: Optional[Vocabulary] = None

    def __post_init__(self):
        if self.kind == "iid":
            self.probs = _check_dist(self.probs, "probs")
            v = self.probs.size
        elif self.kind == "markov":
            self.transition = np.asarray(self.transition, dtype=np.float64)
            if self.transition.ndim != 2 or self.transition.shape[0] != self.transition.shape[1]:
                raise ValueError("transition must be a square matrix")
            for row in self.transition:
                _check_dist(row, "transition row")
            v = self.transition.shape[0]
            self.initial = self.stationary() if self.initial is None else _check_dist(self.initial, "initial")
        else:
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.vocab is None:
            self.vocab = Vocabulary([str(i) for i in range(v)])
        elif self.vocab.size != v:
            raise ValueError("vocabulary size does not match the source")

    @property
    def vocab_size(self) -> int:
        return self.vocab.size

    def stationary(self) -> np.ndarray:
        if self.kind == "iid":
            return self.probs.copy()
        vals, vecs = np.linalg.eig(self.transition.T)
        mu = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
        return mu / mu.sum()

    def marginal(self, length: Optional[int] = None) -> np.ndarray:
        """Token marginal, averaged over the first ``length`` positions for a chain."""
        if self.kind == "iid":
            return self.probs.copy()
        if length is None:
            return self.stationary()
        dist, acc = self.initial.copy(), np.zeros_like(self.initial)
        for _ in range(length):
            acc += dist
            dist = dist @ self.transition
        return acc / length

    def entropy_rate(self) -> float:
        """Nats per token: ``H(pi)`` for i.i.d., ``sum_i mu_i H(P_i)`` for a chain."""
        if self.kind == "iid":
            return _entropy(self.probs)
        mu = self.stationary()
        return float(sum(mu[i] * _entropy(self.transition[i]) for i in range(mu.size)))

    def sample(self, rng: RngStream, n: int, length: int) -> np.ndarray:
        u = uniform(rng, (n, length))
        if self.kind == "iid":
            return _inverse_cdf(np.cumsum(self.probs), u)
        out = np.empty((n, length), dtype=np.int64)
        out[:, 0] = _inverse_cdf(np.cumsum(self.initial), u[:, 0])
        cum = np.cumsum(self.transition, axis=1)
        for j in range(1, length):
            out[:, j] = _inverse_cdf(cum[out[:, j - 1]], u[:, j])
        return out


def _check_dist(p, name):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must be a probability vector")
    return p


def _entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz))) + 0.0  # avoid -0.0


def _inverse_cdf(cum, u):
    cum = np.asarray(cum)
    if cum.ndim == 1:
        idx = np.searchsorted(cum, u, side="right")
    else:
        idx = np.sum(cum <= u[:, None], axis=1)
    return np.minimum(idx, cum.shape[-1] - 1).astype(np.int64)


@dataclasses.dataclass
class MetricsReport:
    unigram_entropy_nats: float
    tv_to_truth: float
    nll_truth: Optional[float]
    n_samples: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = [f.name for f in dataclasses.fields(self)]
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerow(dataclasses.asdict(self))
        return buf.getvalue()


def token_frequencies(samples, vocab_size: int) -> np.ndarray:
    flat = np.asarray(samples, dtype=np.int64).reshape(-1)
    if flat.size == 0:
        raise ValueError("need at least one token")
    return np.bincount(flat, minlength=vocab_size)[:vocab_size] / flat.size


def unigram_entropy(samples) -> float:
    flat = np.asarray(samples, dtype=np.int64).reshape(-1)
    if flat.size == 0:
        raise ValueError("need at least one token")
    return _entropy(np.bincount(flat) / flat.size)


def marginal_tv(samples, truth) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    return 0.5 * float(np.abs(token_frequencies(samples, truth.size) - truth).sum())


def source_nll(source: SyntheticSource, samples) -> float:
    """Mean negative log-likelihood per token under the generating source.

    Returns ``inf`` when a sample leaves the source's support.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.int64))
    v = source.vocab_size
    if samples.size == 0:
        raise ValueError("need at least one token")
    if np.any(samples < 0) or np.any(samples >= v):
        raise ValueError("sample contains a token outside the vocabulary")
    if source.kind == "iid":
        probs = source.probs[samples]
    else:
        first = source.initial[samples[:, 0]]
        rest = source.transition[samples[:, :-1], samples[:, 1:]]
        probs = np.concatenate([first[:, None], rest], axis=1)
    if np.any(probs == 0):
        return math.inf
    return float(-np.mean(np.log(probs)))


def transition_tv(samples, transition) -> np.ndarray:
    """Per-row total variation between empirical bigram transitions and ``transition``."""
    samples = np.asarray(samples, dtype=np.int64)
    transition = np.asarray(transition, dtype=np.float64)
    v = transition.shape[0]
    counts = np.zeros((v, v))
    np.add.at(counts, (samples[:, :-1].ravel(), samples[:, 1:].ravel()), 1.0)
    rows = counts.sum(axis=1, keepdims=True)
    emp = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    tv = 0.5 * np.abs(emp - transition).sum(axis=1)
    tv[rows[:, 0] == 0] = 1.0
    return tv


@dataclasses.dataclass
class ConvergenceResult:
    n_steps: list
    errors: list
    slope: float


def convergence_study(
    spec: OracleSpec,
    n_steps: Sequence[int] = (10, 20, 40, 80),
    solver: str = "euler",
    *,
    seed: int = 0,
    batch: int = 256,
    t_min: float = 1.0,
    t_max: float = 300.0,
    rho: float = 7.0,
    reference_steps: int = 2560,
) -> ConvergenceResult:
    """Global error of the oracle probability-flow ODE against a fine Euler solution.

    All runs share the same initial noise and the same rho-spaced grid family.
    The error is the RMS (over the batch) endpoint distance; ``slope`` is the
    negated least-squares slope of log error against log step count.
    """
    x_init = gaussian(RngStream(seed, 0), (batch, spec.dim)) * t_max

    def field(x, t):
        return oracle_score(spec, x, t)

    ref, _ = integrate(x_init.copy(), rho_grid(reference_steps, t_min, t_max, rho), field, "euler")
    errors = []
    for n in n_steps:
        if n == reference_steps and solver == "euler":
            errors.append(0.0)
            continue
        x, _ = integrate(x_init.copy(), rho_grid(n, t_min, t_max, rho), field, solver)
        errors.append(float(np.sqrt(np.mean(np.sum((x - ref) ** 2, axis=-1)))))
    errs = np.asarray(errors)
    if len(n_steps) >= 2 and np.all(errs > 0):
        slope = -float(np.polyfit(np.log(n_steps), np.log(errs), 1)[0])
    else:
        slope = float("nan")
    return ConvergenceResult(list(n_steps), errors, slope)


def frontier_cross_entropy(model, table, tokens: np.ndarray, t: float, rng: RngStream,
                           self_condition: bool = False) -> float:
    """Cross-entropy at the first generated position behind a clean prefix.

    For every prefix length ``k`` in ``1..L-1`` the first ``k`` tokens are given
    and the rest are noised at level ``t``; only position ``k`` is scored. For a
    stationary Markov source the optimum at large ``t`` is the entropy rate.
    With ``self_condition`` a first pass supplies the ``p`` input, as in training.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n, l = tokens.shape
    total, count = 0.0, 0
    with torch.no_grad():
        emb = table()
        x0 = emb[torch.from_numpy(tokens)]
        tt = torch.full((n,), float(t), dtype=torch.float64)
        for k in range(1, l):
            mask = torch.zeros((n, l), dtype=torch.float64)
            mask[:, k:] = 1.0
            mf = mask.unsqueeze(-1)
            eps = torch.from_numpy(gaussian(rng, (n, l, table.dim)))
            x = (x0 + t * eps) * mf
            c = x0 * (1.0 - mf)
            p = torch.zeros_like(x)
            if self_condition:
                p = (torch.softmax(model(x, c, mask, p, tt), dim=-1) @ emb) * mf
            logp = torch.log_softmax(model(x, c, mask, p, tt)[:, k], dim=-1)
            total += float(-logp.gather(-1, torch.from_numpy(tokens[:, k : k + 1])).sum())
            count += n
    return total / count
