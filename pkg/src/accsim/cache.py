"""Edge cache store: capacity-bounded entries with hit/miss and freshness rules.

A query hits only when the cache holds a full ``top_k`` set of entries that
are simultaneously similar enough (cosine >= theta_hit) and fresh (cached
version equals the knowledge-base version). Anything less is a miss, with
the cause classified as Stale (enough similar entries existed but
staleness broke the set), BelowThreshold (similar entries exist but fewer
than top_k clear the threshold), or Absent (nothing in the neighborhood;
best similarity below theta_hit / 2).

Entries carry the bookkeeping the replacement policies and the DRL state
need: insertion/access sequence numbers, hit counts, sizes, versions, and
the admission-time relevance score. A side HNSW index mirrors the entry
set for the semantic lookup path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import IO

import numpy as np

from .errors import CapacityContractError, ConfigurationError
from .knowledge_base import Chunk, RetrievalParams
from .vector_index import HnswIndex, HnswParams


class LookupOutcome(str, Enum):
    HIT = "hit"
    MISS = "miss"


class MissCause(str, Enum):
    ABSENT = "absent"
    BELOW_THRESHOLD = "below_threshold"
    STALE = "stale"


@dataclass
class CacheEntry:
    chunk_id: int
    embedding: np.ndarray
    cached_version: int
    size_units: int
    insert_seq: int
    last_access_seq: int
    access_count: int
    relevance_score: float


@dataclass
class LookupResult:
    outcome: LookupOutcome
    hit_entries: list[tuple[int, float]]
    miss_cause: MissCause | None = None

    @property
    def is_hit(self) -> bool:
        return self.outcome is LookupOutcome.HIT


class CacheState:
    """Entry store plus aligned arrays for vectorized similarity math.

    The arrays (ids / embeddings / versions) are kept in sync with the
    entry map on every mutation; eviction swap-deletes rows so lookups
    stay O(1).
    """

    def __init__(
        self,
        capacity_units: int,
        dim: int,
        hnsw_params: HnswParams | None = None,
    ):
        if capacity_units < 0:
            raise ConfigurationError(
                f"capacity_units must be non-negative, got {capacity_units}"
            )
        self.capacity_units = capacity_units
        self.dim = dim
        self.entries: dict[int, CacheEntry] = {}
        self.used_units = 0
        self.global_seq = 0
        self.index = HnswIndex(dim, hnsw_params or HnswParams())

        self._ids: list[int] = []
        self._row_of: dict[int, int] = {}
        self._emb = np.zeros((0, dim), dtype=np.float64)
        self._versions = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def free_units(self) -> int:
        return self.capacity_units - self.used_units

    def ids_array(self) -> np.ndarray:
        return np.asarray(self._ids, dtype=np.int64)

    def embedding_matrix(self) -> np.ndarray:
        return self._emb[: len(self._ids)]

    def versions_array(self) -> np.ndarray:
        return self._versions[: len(self._ids)]

    def _next_seq(self) -> int:
        self.global_seq += 1
        return self.global_seq

    # ---------------------------------------------------------------- mutation

    def insert(self, chunk: Chunk, relevance: float) -> None:
        """Add a chunk; the caller must have made room first.

        Inserting an id that is already cached routes to refresh semantics.
        """
        if chunk.chunk_id in self.entries:
            self.refresh(chunk.chunk_id, chunk.version)
            return
        if chunk.size_units > self.free_units:
            raise CapacityContractError(
                f"chunk {chunk.chunk_id} needs {chunk.size_units} units but only "
                f"{self.free_units} are free; evict first"
            )
        seq = self._next_seq()
        entry = CacheEntry(
            chunk_id=chunk.chunk_id,
            embedding=chunk.embedding,
            cached_version=chunk.version,
            size_units=chunk.size_units,
            insert_seq=seq,
            last_access_seq=seq,
            access_count=0,
            relevance_score=relevance,
        )
        self.entries[chunk.chunk_id] = entry
        self.used_units += chunk.size_units

        row = len(self._ids)
        self._ids.append(chunk.chunk_id)
        self._row_of[chunk.chunk_id] = row
        if row >= self._emb.shape[0]:
            grow = max(32, self._emb.shape[0])
            self._emb = np.vstack([self._emb, np.zeros((grow, self.dim))])
            self._versions = np.concatenate(
                [self._versions, np.zeros(grow, dtype=np.int64)]
            )
        self._emb[row] = chunk.embedding
        self._versions[row] = chunk.version
        self.index.insert(chunk.chunk_id, chunk.embedding)

    def evict(self, chunk_id: int) -> None:
        entry = self.entries.pop(chunk_id, None)
        if entry is None:
            raise ValueError(f"chunk {chunk_id} is not cached")
        self.used_units -= entry.size_units
        row = self._row_of.pop(chunk_id)
        last = len(self._ids) - 1
        if row != last:
            moved = self._ids[last]
            self._ids[row] = moved
            self._emb[row] = self._emb[last]
            self._versions[row] = self._versions[last]
            self._row_of[moved] = row
        self._ids.pop()
        self.index.remove(chunk_id)

    def refresh(self, chunk_id: int, new_version: int) -> int:
        """Update a cached copy to a newer version.

        Returns the units transferred (the entry size if the version moved,
        zero for a same-version no-op); refreshes count as overhead, not as
        evictions.
        """
        entry = self.entries.get(chunk_id)
        if entry is None:
            raise ValueError(f"chunk {chunk_id} is not cached")
        if new_version < entry.cached_version:
            raise ValueError(
                f"version regression for chunk {chunk_id}: "
                f"{entry.cached_version} -> {new_version}"
            )
        if new_version == entry.cached_version:
            return 0
        entry.cached_version = new_version
        self._versions[self._row_of[chunk_id]] = new_version
        return entry.size_units

    # ------------------------------------------------------------------ lookup

    def lookup(
        self,
        prompt: np.ndarray,
        params: RetrievalParams,
        theta_hit: float,
        kb_versions: np.ndarray,
    ) -> LookupResult:
        """Hit/miss decision for a prompt; hits touch the returned entries."""
        if not 0.0 < theta_hit < 1.0:
            raise ValueError(f"theta_hit must be in (0, 1), got {theta_hit}")
        if not self.entries:
            return LookupResult(LookupOutcome.MISS, [], MissCause.ABSENT)

        top_k = params.top_k
        live = len(self.entries)
        k = min(live, max(4 * top_k, 32))
        while True:
            ranked = self.index.search(prompt, k)
            if k >= live or (ranked and ranked[-1][1] < theta_hit):
                break
            k = min(live, k * 2)

        best_sim = ranked[0][1] if ranked else -1.0
        qualifying = [(cid, sim) for cid, sim in ranked if sim >= theta_hit]
        fresh = [
            (cid, sim)
            for cid, sim in qualifying
            if self.entries[cid].cached_version == kb_versions[cid]
        ]
        if len(fresh) >= top_k:
            hit_entries = fresh[:top_k]
            for cid, _ in hit_entries:
                entry = self.entries[cid]
                entry.access_count += 1
                entry.last_access_seq = self._next_seq()
            return LookupResult(LookupOutcome.HIT, hit_entries)

        if best_sim < theta_hit / 2.0:
            cause = MissCause.ABSENT
        elif len(qualifying) >= top_k:
            cause = MissCause.STALE
        else:
            cause = MissCause.BELOW_THRESHOLD
        return LookupResult(LookupOutcome.MISS, [], cause)

    # ------------------------------------------------------------------- debug

    def dump(self, fh: IO[str]) -> None:
        for cid in sorted(self.entries):
            e = self.entries[cid]
            fh.write(
                json.dumps(
                    {
                        "chunk_id": e.chunk_id,
                        "cached_version": e.cached_version,
                        "size_units": e.size_units,
                        "insert_seq": e.insert_seq,
                        "last_access_seq": e.last_access_seq,
                        "access_count": e.access_count,
                        "relevance_score": e.relevance_score,
                    }
                )
                + "\n"
            )
