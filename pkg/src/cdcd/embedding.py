"""Learnable token embeddings kept on the sphere of radius sqrt(d)."""

from __future__ import annotations

import dataclasses

import numpy as np
import torch

from .numerics import RngStream, gaussian

_COLLAPSED_ROW = 1e-30


@dataclasses.dataclass
class Vocabulary:
    tokens: list

    def __post_init__(self):
        self.tokens = list(self.tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"token {token!r} is not in the vocabulary") from None

    def encode(self, tokens) -> np.ndarray:
        return np.array([self.index(t) for t in tokens], dtype=np.int64)

    def decode(self, ids) -> list:
        return [self.tokens[int(i)] for i in ids]


class EmbeddingTable(torch.nn.Module):
    """Raw ``V x d`` parameters; only their normalised view is ever used."""

    def __init__(self, vocab_size: int, dim: int, rng: RngStream, init_scale: float = 1e-3):
        super().__init__()
        if init_scale <= 0:
            raise ValueError("init_scale must be positive")
        self.dim = dim
        self.init_scale = init_scale
        raw = init_scale * gaussian(rng, (vocab_size, dim))
        self.raw = torch.nn.Parameter(torch.from_numpy(raw))

    @property
    def vocab_size(self) -> int:
        return self.raw.shape[0]

    def forward(self) -> torch.Tensor:
        return normalized_embeddings(self.raw)

    def numpy(self) -> np.ndarray:
        with torch.no_grad():
            return normalized_embeddings(self.raw).numpy().copy()


def normalized_embeddings(raw):
    """Rows rescaled to L2 norm ``sqrt(d)``; differentiable for torch inputs.

    A row with norm below 1e-30 raises: it means the table collapsed.
    """
    d = raw.shape[-1]
    if isinstance(raw, torch.Tensor):
        norms = torch.linalg.vector_norm(raw, dim=-1, keepdim=True)
        if bool((norms < _COLLAPSED_ROW).any()):
            raise ValueError("embedding row with near-zero norm")
        return raw * (d**0.5 / norms)
    raw = np.asarray(raw, dtype=np.float64)
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    if np.any(norms < _COLLAPSED_ROW):
        raise ValueError("embedding row with near-zero norm")
    return raw * (np.sqrt(d) / norms)


def _per_example(t, like):
    if isinstance(like, torch.Tensor):
        t = torch.as_tensor(t, dtype=like.dtype)
    else:
        t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(tuple(t.shape) + (1,) * (like.ndim - t.ndim))


def corrupt(x0, t, rng: RngStream):
    """Add isotropic Gaussian noise with standard deviation ``t``.

    ``t`` is a scalar or one value per leading batch entry. Consumes one
    gaussian draw per element of ``x0``.
    """
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be non-negative")
    eps = gaussian(rng, tuple(x0.shape))
    if isinstance(x0, torch.Tensor):
        eps = torch.from_numpy(eps).to(x0.dtype)
    return x0 + _per_example(t, x0) * eps


def input_scale(x, t):
    """Scale noisy embeddings by ``1 / sqrt(t^2 + 1)`` (unit data variance)."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be non-negative")
    tt = _per_example(t, x)
    if isinstance(x, torch.Tensor):
        return x / torch.sqrt(tt**2 + 1.0)
    return x / np.sqrt(tt**2 + 1.0)
