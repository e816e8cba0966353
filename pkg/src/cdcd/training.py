"""Cross-entropy training of the denoiser with warped timesteps."""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np
import torch

from .denoiser import Transformer
from .embedding import EmbeddingTable
from .numerics import RngStream, gaussian, integers, low_discrepancy_uniforms, uniform
from .optim import AdamConfig, AdamState, adam_step
from .warp import (
    WarpCdf,
    fit_step,
    importance_weight,
    manipulate,
    normalize_time,
    sample_timestep,
)

MASK_KINDS = ("prefix_fixed", "prefix_random", "fully_random", "mixed")

# stream ids are (purpose << 40) | step so every step draws from a fresh stream
_STEP_STREAM = 3 << 40


@dataclasses.dataclass
class MaskStrategy:
    kind: str = "mixed"
    prefix_len: int = 0
    prefix_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if not 0.0 <= self.prefix_fraction <= 1.0:
            raise ValueError("prefix_fraction must lie in [0, 1]")


@dataclasses.dataclass
class TrainConfig:
    batch: int = 64
    seq_len: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    cond_dropout: float = 0.1
    self_cond_fraction: float = 0.5
    steps: int = 5000
    seed: int = 0
    grad_clip: Optional[float] = 1.0
    mask: MaskStrategy = dataclasses.field(default_factory=MaskStrategy)
    time_warping: bool = True
    warp_shape: Optional[tuple] = None
    warp_temperature: float = 1.0
    warp_uniformity: float = 0.0
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if isinstance(self.mask, dict):
            self.mask = MaskStrategy(**self.mask)
        if self.warp_shape is not None:
            self.warp_shape = tuple(self.warp_shape)
        for name in ("cond_dropout", "self_cond_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.batch < 1 or self.seq_len < 1:
            raise ValueError("batch and seq_len must be positive")

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2)

    def lr_at(self, step: int) -> float:
        """Model learning rate for the update taken at ``step`` (0-based); cosine decays to zero at ``steps``."""
        if self.lr_schedule == "constant":
            return self.lr
        frac = min(step, self.steps) / self.steps
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclasses.dataclass
class LossStats:
    step: int
    mean_weighted_ce: float
    per_example: list

    def t_quantiles(self, qs=(0.1, 0.5, 0.9)) -> list:
        ts = np.array([t for t, _ in self.per_example])
        return [float(np.quantile(ts, q)) for q in qs]


@dataclasses.dataclass
class TrainState:
    model: Transformer
    table: EmbeddingTable
    warp: WarpCdf
    adam: AdamState = dataclasses.field(default_factory=AdamState)
    step: int = 0

    def named_parameters(self) -> dict:
        params = {"embedding.raw": self.table.raw}
        params.update({f"model.{k}": v for k, v in self.model.named_parameters()})
        return params


def sample_mask(strategy: MaskStrategy, length: int, rng: RngStream) -> np.ndarray:
    """One boolean mask, ``True`` where the token is noisy (to be generated)."""
    if length < 1:
        raise ValueError("length must be >= 1")
    kind = strategy.kind
    if kind == "mixed":
        kind = "prefix_random" if uniform(rng, (1,))[0] < strategy.prefix_fraction else "fully_random"
    if kind == "prefix_fixed":
        k = min(max(strategy.prefix_len, 0), length)
        return np.arange(length) >= k
    k = int(integers(rng, length + 1, (1,))[0])
    if kind == "prefix_random":
        return np.arange(length) >= k
    clean = np.argsort(uniform(rng, (length,)), kind="stable")[:k]
    mask = np.ones(length, dtype=bool)
    mask[clean] = False
    return mask


def sample_masks(strategy: MaskStrategy, batch: int, length: int, rng: RngStream) -> np.ndarray:
    return np.stack([sample_mask(strategy, length, rng) for _ in range(batch)])


def masked_cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean token cross-entropy over noisy positions, per example (``0`` if none)."""
    logp = torch.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    mask = mask.to(logp.dtype)
    count = mask.sum(-1)
    return -(logp * mask).sum(-1) / torch.clamp(count, min=1.0)


def _global_clip(grads: dict, max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total


def build_inputs(x0, eps, t, mask, drop):
    """Assemble ``(x, c, m_in)`` for one batch.

    ``x`` holds noisy embeddings at originally-noisy positions and zeros
    elsewhere. Dropped examples lose all conditioning: ``c`` is zeroed and the
    mask channel becomes all-noisy.
    """
    mf = mask.to(x0.dtype).unsqueeze(-1)
    keep = (~drop).to(x0.dtype)[:, None, None]
    x = (x0 + t[:, None, None] * eps) * mf
    c = x0 * (1.0 - mf) * keep
    m_in = torch.where(drop[:, None], torch.ones_like(mask), mask).to(x0.dtype)
    return x, c, m_in


@dataclasses.dataclass
class StepBatch:
    """Everything one step sampled, plus the differentiable loss."""

    loss: torch.Tensor
    ce: torch.Tensor
    t: np.ndarray
    weights: np.ndarray
    masks: np.ndarray
    drop: np.ndarray
    n_self_cond: int


def forward_loss(state: TrainState, tokens: np.ndarray, cfg: TrainConfig, rng: RngStream) -> StepBatch:
    """Sample timesteps, masks and noise from ``rng`` and build the weighted loss."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ValueError("tokens must be a non-empty (batch, length) array")
    b, l = tokens.shape
    warp = state.warp

    u = low_discrepancy_uniforms(rng, b)
    u = u[np.argsort(uniform(rng, (b,)), kind="stable")]
    if cfg.time_warping:
        view = manipulate(warp, cfg.warp_temperature, cfg.warp_uniformity)
        t = np.asarray(sample_timestep(view, u))
        weights = np.asarray(importance_weight(view, normalize_time(t, warp.t_min, warp.t_max)))
    else:
        t = warp.t_min + (warp.t_max - warp.t_min) * u
        weights = np.ones(b)

    masks = sample_masks(cfg.mask, b, l, rng)
    drop = uniform(rng, (b,)) < cfg.cond_dropout
    eps = gaussian(rng, (b, l, state.table.dim))
    n_sc = int(round(cfg.self_cond_fraction * b))

    tok_t = torch.from_numpy(tokens)
    mask_t = torch.from_numpy(masks)
    t_t = torch.from_numpy(t)
    emb = state.table()
    x0 = emb[tok_t]
    x, c, m_in = build_inputs(x0, torch.from_numpy(eps), t_t, mask_t, torch.from_numpy(drop))

    p = torch.zeros_like(x)
    if n_sc > 0:
        with torch.no_grad():
            first = state.model(x[:n_sc], c[:n_sc], m_in[:n_sc], p[:n_sc], t_t[:n_sc])
            x0_hat = torch.softmax(first, dim=-1) @ emb.detach()
            p[:n_sc] = x0_hat * mask_t[:n_sc].to(x0_hat.dtype).unsqueeze(-1)
        p = p.detach()

    logits = state.model(x, c, m_in, p, t_t)
    ce = masked_cross_entropy(logits, tok_t, mask_t)
    loss = torch.mean(torch.from_numpy(weights) * ce)
    return StepBatch(loss, ce, t, weights, masks, drop, n_sc)


def train_step(state: TrainState, tokens: np.ndarray, cfg: TrainConfig) -> LossStats:
    """One optimiser step on the denoiser and embeddings, then one warp fit step."""
    rng = RngStream(cfg.seed, _STEP_STREAM | state.step)
    sb = forward_loss(state, tokens, cfg, rng)
    if not bool(torch.isfinite(sb.loss)):
        raise FloatingPointError(f"non-finite loss at step {state.step}")

    params = state.named_parameters()
    for prm in params.values():
        prm.grad = None
    sb.loss.backward()
    grads = {k: v.grad.numpy().copy() for k, v in params.items()}
    if cfg.grad_clip is not None:
        _global_clip(grads, cfg.grad_clip)
    with torch.no_grad():
        adam_step({k: v.detach().numpy() for k, v in params.items()}, grads, state.adam,
                  dataclasses.replace(cfg.adam, lr=cfg.lr_at(state.step)))

    ce_np = sb.ce.detach().numpy().copy()
    if cfg.time_warping:
        informative = sb.masks.any(axis=1)
        fit_step(state.warp, sb.t[informative], ce_np[informative], sb.weights[informative], cfg.warp_shape)
    state.step += 1
    return LossStats(state.step, float(sb.loss.detach()), list(zip(sb.t.tolist(), ce_np.tolist())))
