"""Continuous diffusion over learned token embeddings, at desk scale."""

from .embedding import EmbeddingTable, Vocabulary
from .numerics import RngStream
from .sampler import SamplerConfig, sample
from .score import OracleSpec
from .training import TrainConfig, train_step
from .warp import WarpCdf

__all__ = [
    "EmbeddingTable",
    "OracleSpec",
    "RngStream",
    "SamplerConfig",
    "TrainConfig",
    "Vocabulary",
    "WarpCdf",
    "sample",
    "train_step",
]
