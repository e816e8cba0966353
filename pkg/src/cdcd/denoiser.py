"""Mask-conditional Transformer denoiser and the exact oracle drop-in.

The network sees, per position, the concatenation of the scaled noisy
embedding ``x``, the conditioning embedding ``c``, the noise mask ``m`` and the
self-conditioning estimate ``p``. It is a pre-LN Transformer without attention
masking; every layer norm is followed by a timestep-dependent scale and shift.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
from scipy.special import logsumexp
import torch.nn.functional as F
from torch import nn

from .embedding import EmbeddingTable, input_scale
from .numerics import RngStream, gaussian


@dataclasses.dataclass
class DenoiserConfig:
    vocab: int
    d: int = 16
    blocks: int = 2
    width: int = 64
    heads: int = 2
    fourier_features: int = 16
    time_mlp_width: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("vocab", "d", "blocks", "width", "heads", "fourier_features", "time_mlp_width", "mlp_ratio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if (self.width // self.heads) % 2:
            raise ValueError("head dimension must be even for rotary encodings")
        if self.fourier_features % 2:
            raise ValueError("fourier_features must be even")


class FiLM(nn.Module):
    def __init__(self, cond_width: int, width: int):
        super().__init__()
        self.proj = nn.Linear(cond_width, 2 * width, dtype=torch.float64)

    def forward(self, h, temb):
        scale, shift = self.proj(temb).unsqueeze(1).chunk(2, dim=-1)
        return F.layer_norm(h, h.shape[-1:]) * (1.0 + scale) + shift


def rotary(q: torch.Tensor) -> torch.Tensor:
    """Rotary position encoding over the sequence axis of ``(B, H, L, hd)``."""
    seq, hd = q.shape[-2], q.shape[-1]
    half = hd // 2
    inv_freq = 10000.0 ** (-torch.arange(half, dtype=q.dtype) / half)
    angles = torch.arange(seq, dtype=q.dtype)[:, None] * inv_freq[None, :]
    cos, sin = torch.cos(angles), torch.sin(angles)
    q1, q2 = q[..., :half], q[..., half:]
    return torch.cat([q1 * cos - q2 * sin, q1 * sin + q2 * cos], dim=-1)


class Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        w = cfg.width
        self.heads = cfg.heads
        self.norm_attn = FiLM(cfg.time_mlp_width, w)
        self.qkv = nn.Linear(w, 3 * w, dtype=torch.float64)
        self.attn_out = nn.Linear(w, w, dtype=torch.float64)
        self.norm_mlp = FiLM(cfg.time_mlp_width, w)
        self.fc1 = nn.Linear(w, cfg.mlp_ratio * w, dtype=torch.float64)
        self.fc2 = nn.Linear(cfg.mlp_ratio * w, w, dtype=torch.float64)

    def forward(self, h, temb):
        b, l, w = h.shape
        hd = w // self.heads
        q, k, v = self.qkv(self.norm_attn(h, temb)).chunk(3, dim=-1)
        q, k, v = (z.reshape(b, l, self.heads, hd).transpose(1, 2) for z in (q, k, v))
        q, k = rotary(q), rotary(k)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        h = h + self.attn_out((att @ v).transpose(1, 2).reshape(b, l, w))
        return h + self.fc2(F.gelu(self.fc1(self.norm_mlp(h, temb))))


class TimeEmbedding(nn.Module):
    """Fixed random Fourier features of ``log t`` followed by a two-layer MLP."""

    def __init__(self, cfg: DenoiserConfig, rng: RngStream):
        super().__init__()
        freqs = gaussian(rng, (cfg.fourier_features // 2,))
        self.register_buffer("freqs", torch.from_numpy(freqs))
        self.fc1 = nn.Linear(cfg.fourier_features, cfg.time_mlp_width, dtype=torch.float64)
        self.fc2 = nn.Linear(cfg.time_mlp_width, cfg.time_mlp_width, dtype=torch.float64)

    def forward(self, t):
        angles = 2.0 * math.pi * torch.log(t)[:, None] * self.freqs[None, :]
        feats = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
        return F.silu(self.fc2(F.silu(self.fc1(feats))))


class Transformer(nn.Module):
    def __init__(self, cfg: DenoiserConfig, rng: RngStream):
        super().__init__()
        self.cfg = cfg
        self.time = TimeEmbedding(cfg, rng)
        self.inp = nn.Linear(3 * cfg.d + 1, cfg.width, dtype=torch.float64)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.blocks))
        self.norm_out = FiLM(cfg.time_mlp_width, cfg.width)
        self.out = nn.Linear(cfg.width, cfg.vocab, dtype=torch.float64)
        self._init_weights(rng)

    def _init_weights(self, rng: RngStream):
        # deterministic across torch versions: weights come from our own stream
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                else:
                    fan_in = p.shape[1]
                    p.copy_(torch.from_numpy(gaussian(rng, tuple(p.shape)) / math.sqrt(fan_in)))

    def forward(self, x, c, m, p, t):
        """Logits ``(B, L, V)`` from stacked inputs; ``x`` is the raw noisy state."""
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
        temb = self.time(t)
        feats = torch.cat([input_scale(x, t), c, m.unsqueeze(-1).to(x.dtype), p], dim=-1)
        h = self.inp(feats)
        for i, block in enumerate(self.blocks):
            h = block(h, temb)
            if not bool(torch.isfinite(h).all()):
                raise FloatingPointError(f"non-finite activations after block {i}")
        return self.out(self.norm_out(h, temb))


def time_embedding(model: Transformer, t) -> torch.Tensor:
    return model.time(torch.as_tensor(t, dtype=torch.float64).reshape(-1))


class LearnedDenoiser:
    """Numpy-facing wrapper around a trained Transformer, gradient-free."""

    def __init__(self, model: Transformer):
        self.model = model

    def __call__(self, x, c, m, p, t):
        with torch.no_grad():
            logits = self.model(
                torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64)),
                torch.from_numpy(np.ascontiguousarray(c, dtype=np.float64)),
                torch.from_numpy(np.ascontiguousarray(m, dtype=np.float64)),
                torch.from_numpy(np.ascontiguousarray(p, dtype=np.float64)),
                torch.from_numpy(np.ascontiguousarray(t, dtype=np.float64)),
            )
        return logits.numpy()


def oracle_forward(spec, x, t) -> np.ndarray:
    """``log pi_i - |x - e_i|^2 / (2 t^2)`` at every position."""
    x = np.asarray(x, dtype=np.float64)
    d2 = np.sum((x[..., None, :] - spec.embeddings) ** 2, axis=-1)
    t = np.asarray(t, dtype=np.float64)
    t = t.reshape(t.shape + (1,) * (d2.ndim - t.ndim))
    with np.errstate(divide="ignore"):
        return np.log(spec.prior) - d2 / (2.0 * t**2)


class OracleDenoiser:
    """Exact Bayes posterior logits under the Gaussian mixture; ignores c, m and p."""

    def __init__(self, spec):
        self.spec = spec

    def __call__(self, x, c, m, p, t):
        return oracle_forward(self.spec, x, t)


class MarkovOracleDenoiser:
    """Exact posterior marginals for sequences from a Markov chain, by forward-backward.

    Noisy positions emit ``N(x; e_tok, t^2 I)``; clean positions (``m = 0``) are
    pinned to the token whose embedding is nearest to ``c``.
    """

    def __init__(self, transition, initial, embeddings):
        self.log_p = _safe_log(np.asarray(transition, dtype=np.float64))
        self.log_init = _safe_log(np.asarray(initial, dtype=np.float64))
        self.embeddings = np.asarray(embeddings, dtype=np.float64)

    def __call__(self, x, c, m, p, t):
        x, c, m = (np.asarray(a, dtype=np.float64) for a in (x, c, m))
        b, l, _ = x.shape
        t = np.asarray(t, dtype=np.float64).reshape(b, 1, 1)
        d2 = np.sum((x[..., None, :] - self.embeddings) ** 2, axis=-1)
        emit = -d2 / (2.0 * t**2)
        clean_tok = np.argmin(np.sum((c[..., None, :] - self.embeddings) ** 2, axis=-1), axis=-1)
        pinned = np.where(np.arange(self.embeddings.shape[0]) == clean_tok[..., None], 0.0, -np.inf)
        emit = np.where(m[..., None] > 0.5, emit, pinned)

        fwd = np.empty_like(emit)
        fwd[:, 0] = self.log_init + emit[:, 0]
        for j in range(1, l):
            fwd[:, j] = logsumexp(fwd[:, j - 1, :, None] + self.log_p, axis=1) + emit[:, j]
        bwd = np.zeros_like(emit)
        for j in range(l - 2, -1, -1):
            bwd[:, j] = logsumexp(self.log_p + (emit[:, j + 1] + bwd[:, j + 1])[:, None, :], axis=2)
        post = fwd + bwd
        return post - logsumexp(post, axis=-1, keepdims=True)


def _safe_log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


def build_model(cfg: DenoiserConfig, seed: int, init_scale: float = 1e-3):
    """Transformer plus embedding table, initialised from dedicated streams."""
    table = EmbeddingTable(cfg.vocab, cfg.d, RngStream(seed, _EMBED_STREAM), init_scale)
    model = Transformer(cfg, RngStream(seed, _MODEL_STREAM))
    return model, table


_EMBED_STREAM = 1 << 40
_MODEL_STREAM = 2 << 40
