"""Central knowledge base: corpus generation, versioned chunks, and retrieval.

The corpus mixes domain content (topics 0 .. n_topics-1, the only topics any
workload task ever queries) with extraneous content placed on reserved topic
ids at and above ``n_topics``. Extraneous chunks are therefore retrievable
but never useful, so caching them can only waste capacity.

Dynamic chunks advance their version over time; a cached copy whose version
lags the knowledge base is stale and cannot satisfy hits.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable

import numpy as np

from .embedding import EmbeddingParams, embed, topic_anchor
from .errors import ConfigurationError
from .vector_index import HnswIndex, HnswParams


class Volatility(str, Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass
class Chunk:
    chunk_id: int
    topic_id: int
    embedding: np.ndarray
    size_units: int
    volatility: Volatility
    version: int = 0
    extraneous: bool = False


@dataclass(frozen=True)
class CorpusConfig:
    n_topics: int = 10
    chunks_per_topic: int = 50
    extraneous_fraction: float = 0.3
    dynamic_fraction: float = 0.4
    volatility_skew: float = 0.75
    size_choices: tuple[int, ...] = (1, 2, 3)
    p_update: float = 0.02

    def __post_init__(self) -> None:
        if self.n_topics < 1 or self.chunks_per_topic < 1:
            raise ConfigurationError("n_topics and chunks_per_topic must be positive")
        if not 0.0 <= self.extraneous_fraction < 1.0:
            raise ConfigurationError(
                f"extraneous_fraction must be in [0, 1), got {self.extraneous_fraction}"
            )
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            raise ConfigurationError(
                f"dynamic_fraction must be in [0, 1], got {self.dynamic_fraction}"
            )
        if not 0.0 <= self.volatility_skew <= 1.0:
            raise ConfigurationError(
                f"volatility_skew must be in [0, 1], got {self.volatility_skew}"
            )
        if not 0.0 <= self.p_update <= 1.0:
            raise ConfigurationError(f"p_update must be in [0, 1], got {self.p_update}")
        if not self.size_choices or any(s < 1 for s in self.size_choices):
            raise ConfigurationError("size_choices must be positive integers")

    def topic_dynamic_fraction(self, topic_id: int) -> float:
        """Per-topic dynamic share: even topics calm, odd topics volatile.

        Content domains age at very different rates (regulations vs live
        conditions), so volatility concentrates by topic while the corpus
        mean stays at dynamic_fraction. skew = 0 is uniform.
        """
        sign = -1.0 if topic_id % 2 == 0 else 1.0
        return min(1.0, max(0.0, self.dynamic_fraction * (1.0 + sign * self.volatility_skew)))


@dataclass(frozen=True)
class RetrievalParams:
    top_k: int = 10
    candidate_m: int = 24

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ConfigurationError(f"top_k must be positive, got {self.top_k}")
        if self.candidate_m < self.top_k:
            raise ConfigurationError(
                f"candidate_m ({self.candidate_m}) must be >= top_k ({self.top_k})"
            )


@dataclass
class CandidateSet:
    """Proactively retrieved chunks, descending similarity to the prompt."""

    candidates: list[tuple[Chunk, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)


def extraneous_chunk_count(config: CorpusConfig) -> int:
    """Extraneous chunks added on top of the domain corpus.

    The fraction applies to the *total* corpus: with f extraneous among
    domain + extraneous, the count is ceil(f / (1 - f) * domain).
    """
    domain = config.n_topics * config.chunks_per_topic
    f = config.extraneous_fraction
    if f == 0.0:
        return 0
    return math.ceil(f / (1.0 - f) * domain)


def generate_corpus(
    config: CorpusConfig, embed_params: EmbeddingParams, seed: int
) -> list[Chunk]:
    """Deterministic corpus: domain topics first, then reserved extraneous topics."""
    domain = config.n_topics * config.chunks_per_topic
    extra = extraneous_chunk_count(config)
    total = domain + extra
    rng = np.random.default_rng(np.random.SeedSequence(seed & ((1 << 64) - 1)))
    sizes = rng.choice(np.asarray(config.size_choices), size=total)
    volatility_draw = rng.random(total)

    chunks: list[Chunk] = []
    for cid in range(total):
        if cid < domain:
            topic = cid // config.chunks_per_topic
            extraneous = False
            p_dynamic = config.topic_dynamic_fraction(topic)
        else:
            topic = config.n_topics + (cid - domain) // config.chunks_per_topic
            extraneous = True
            p_dynamic = config.dynamic_fraction
        chunks.append(
            Chunk(
                chunk_id=cid,
                topic_id=topic,
                embedding=embed(topic, cid, embed_params),
                size_units=int(sizes[cid]),
                volatility=Volatility.DYNAMIC
                if volatility_draw[cid] < p_dynamic
                else Volatility.STATIC,
                version=0,
                extraneous=extraneous,
            )
        )
    return chunks


class KnowledgeBase:
    """Corpus plus its vector index, version clock, and retrieval entry points.

    Chunk ids must be dense (0 .. n-1) so version state can live in flat
    arrays; ``generate_corpus`` and the corpus file format both guarantee it.
    """

    def __init__(
        self,
        chunks: list[Chunk],
        embed_params: EmbeddingParams,
        corpus_config: CorpusConfig,
        hnsw_params: HnswParams | None = None,
        exact: bool = False,
    ):
        if not chunks:
            raise ConfigurationError("knowledge base needs at least one chunk")
        if sorted(c.chunk_id for c in chunks) != list(range(len(chunks))):
            raise ConfigurationError("chunk ids must be dense integers 0..n-1")
        self.chunks = sorted(chunks, key=lambda c: c.chunk_id)
        self.embed_params = embed_params
        self.corpus_config = corpus_config
        self.exact = exact

        n = len(self.chunks)
        self.embedding_matrix = np.stack([c.embedding for c in self.chunks])
        self.versions = np.array([c.version for c in self.chunks], dtype=np.int64)
        self.sizes = np.array([c.size_units for c in self.chunks], dtype=np.int64)
        self._dynamic_ids = np.array(
            [c.chunk_id for c in self.chunks if c.volatility is Volatility.DYNAMIC],
            dtype=np.int64,
        )
        self.total_size_units = int(self.sizes.sum())
        self.max_size_units = int(self.sizes.max())

        self.domain_topic_ids = sorted(
            {c.topic_id for c in self.chunks if not c.extraneous}
        )
        reserved = sorted({c.topic_id for c in self.chunks if c.extraneous})
        self.reserved_topic_ids = reserved
        if reserved:
            self.reserved_anchor_matrix = np.stack(
                [topic_anchor(t, embed_params) for t in reserved]
            )
        else:
            self.reserved_anchor_matrix = np.zeros((0, embed_params.dim))

        self.index: HnswIndex | None = None
        if not exact:
            self.index = HnswIndex(embed_params.dim, hnsw_params or HnswParams())
            for c in self.chunks:
                self.index.insert(c.chunk_id, c.embedding)

        self._update_rng = np.random.default_rng(0)

    def __len__(self) -> int:
        return len(self.chunks)

    # ------------------------------------------------------------------ lookup

    def chunk(self, chunk_id: int) -> Chunk:
        return self.chunks[chunk_id]

    def current_version(self, chunk_id: int) -> int:
        return int(self.versions[chunk_id])

    def _ranked(self, prompt: np.ndarray, k: int) -> list[tuple[int, float]]:
        if self.exact:
            return self.exact_ranked(prompt, k)
        assert self.index is not None
        return self.index.search(prompt, k)

    def exact_ranked(self, prompt: np.ndarray, k: int) -> list[tuple[int, float]]:
        """Exact-scan ranking used as the retrieval oracle and for ground truth."""
        prompt = np.asarray(prompt, dtype=np.float64)
        qn = np.linalg.norm(prompt)
        if qn == 0.0:
            raise ValueError("cannot search with a zero vector")
        sims = self.embedding_matrix @ (prompt / qn)
        order = np.lexsort((np.arange(len(sims)), -sims))[:k]
        return [(int(i), float(sims[i])) for i in order]

    def retrieve_top_k(
        self, prompt: np.ndarray, params: RetrievalParams
    ) -> list[tuple[Chunk, float]]:
        """The k chunks nearest the prompt (current versions)."""
        return [(self.chunks[i], s) for i, s in self._ranked(prompt, params.top_k)]

    def retrieve_candidates(
        self, prompt: np.ndarray, params: RetrievalParams
    ) -> CandidateSet:
        """The larger proactive set the caching agent decides over."""
        ranked = self._ranked(prompt, params.candidate_m)
        return CandidateSet([(self.chunks[i], s) for i, s in ranked])

    # ----------------------------------------------------------------- updates

    def set_update_rng(self, rng: np.random.Generator) -> None:
        self._update_rng = rng

    def advance_time(
        self, ticks: int = 1, rng: np.random.Generator | int | None = None
    ) -> list[tuple[int, int]]:
        """Advance the version clock; each dynamic chunk bumps per tick w.p. p_update.

        Returns the update log as (chunk_id, new_version) pairs.
        """
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(np.random.SeedSequence(int(rng)))
        gen = rng if rng is not None else self._update_rng
        log: list[tuple[int, int]] = []
        if len(self._dynamic_ids) == 0:
            return log
        p = self.corpus_config.p_update
        for _ in range(ticks):
            hits = self._dynamic_ids[gen.random(len(self._dynamic_ids)) < p]
            for cid in hits.tolist():
                self.versions[cid] += 1
                self.chunks[cid].version = int(self.versions[cid])
                log.append((cid, int(self.versions[cid])))
        return log

    def reset_versions(self) -> None:
        self.versions[:] = 0
        for c in self.chunks:
            c.version = 0

    # -------------------------------------------------------------- persistence

    def corpus_hash(self) -> str:
        h = hashlib.sha256()
        for c in self.chunks:
            h.update(
                f"{c.chunk_id},{c.topic_id},{c.volatility.value},"
                f"{c.size_units},{int(c.extraneous)}:".encode()
            )
            h.update(c.embedding.tobytes())
        return h.hexdigest()

    def export_corpus(self, fh: IO[str]) -> None:
        for c in self.chunks:
            fh.write(json.dumps(chunk_to_record(c)) + "\n")

    @staticmethod
    def import_corpus(lines: Iterable[str]) -> list[Chunk]:
        chunks = [chunk_from_record(json.loads(line)) for line in lines if line.strip()]
        return chunks


def chunk_to_record(c: Chunk) -> dict:
    return {
        "chunk_id": c.chunk_id,
        "topic_id": c.topic_id,
        "volatility": c.volatility.value,
        "version": c.version,
        "size_units": c.size_units,
        "extraneous": c.extraneous,
        "embedding": base64.b64encode(
            np.asarray(c.embedding, dtype=np.float64).tobytes()
        ).decode("ascii"),
    }


def chunk_from_record(rec: dict) -> Chunk:
    emb = np.frombuffer(base64.b64decode(rec["embedding"]), dtype=np.float64)
    return Chunk(
        chunk_id=int(rec["chunk_id"]),
        topic_id=int(rec["topic_id"]),
        embedding=emb.copy(),
        size_units=int(rec["size_units"]),
        volatility=Volatility(rec["volatility"]),
        version=int(rec["version"]),
        extraneous=bool(rec["extraneous"]),
    )
