"""Deterministic synthetic embeddings, the similarity kernel, and token chunking.

Embeddings are unit vectors anchored per topic: every topic gets a random
unit "anchor" direction, and each item is the anchor plus seeded Gaussian
noise, re-normalized. ``noise_sigma`` is the expected *norm* of the noise
term (the raw Gaussian draw is scaled by 1/sqrt(dim)), so within-topic
spread is controlled independently of the vector dimension.

All randomness is keyed by (master_seed, purpose, topic, item) tuples via
``numpy`` seed sequences, so corpus generation is reproducible and safe to
parallelize.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError

_MASK64 = (1 << 64) - 1

# spawn-key purpose tags, so anchor and noise streams never collide
_ANCHOR_KEY = 1
_NOISE_KEY = 2


@dataclass(frozen=True)
class EmbeddingParams:
    """Shape of the synthetic embedding space."""

    dim: int = 64
    noise_sigma: float = 0.3
    master_seed: int = 0

    def __post_init__(self) -> None:
        if self.dim < 2:
            raise ConfigurationError(f"embedding dim must be >= 2, got {self.dim}")
        if self.noise_sigma < 0:
            raise ConfigurationError(
                f"noise_sigma must be non-negative, got {self.noise_sigma}"
            )


def _keyed_rng(master_seed: int, *key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(
        entropy=master_seed & _MASK64, spawn_key=tuple(k & _MASK64 for k in key)
    )
    return np.random.default_rng(seq)


def topic_anchor(topic_id: int, params: EmbeddingParams) -> np.ndarray:
    """Unit anchor direction for a topic, a pure function of (seed, topic)."""
    raw = _keyed_rng(params.master_seed, _ANCHOR_KEY, topic_id).standard_normal(
        params.dim
    )
    return raw / np.linalg.norm(raw)


def embed(topic_id: int, item_seed: int, params: EmbeddingParams) -> np.ndarray:
    """Embed one item of a topic as a unit vector near the topic anchor.

    Deterministic: identical (topic_id, item_seed, params) triples always
    produce bit-identical vectors. With noise_sigma == 0 the anchor itself
    is returned exactly.
    """
    anchor = topic_anchor(topic_id, params)
    if params.noise_sigma == 0.0:
        return anchor
    g = _keyed_rng(
        params.master_seed, _NOISE_KEY, topic_id, item_seed
    ).standard_normal(params.dim)
    v = anchor + (params.noise_sigma / np.sqrt(params.dim)) * g
    return v / np.linalg.norm(v)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


def chunk_tokens(
    tokens: Sequence, chunk_size: int, overlap: int = 0
) -> list[tuple[int, int]]:
    """Split a token sequence into [start, end) windows.

    Windows start at multiples of ``chunk_size - overlap``; the final window
    may be shorter. Every token is covered by at least one window.
    """
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be positive, got {chunk_size}")
    if overlap < 0:
        raise ValueError(f"overlap must be non-negative, got {overlap}")
    if overlap >= chunk_size:
        raise ValueError(f"overlap ({overlap}) must be < chunk_size ({chunk_size})")
    n = len(tokens)
    stride = chunk_size - overlap
    ranges = []
    start = 0
    while start < n:
        ranges.append((start, min(start + chunk_size, n)))
        start += stride
    return ranges
