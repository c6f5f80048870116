"""Replacement policies: victim selection primitives and baseline admission.

Every victim op is a deterministic min-scan over one key with ascending
chunk id as the final tie-break, so experiment traces replay exactly.

GDSF keeps the classic greedy-dual inflation clock: the priority of an
entry is L + access_count * relevance / size, the victim is the minimum,
and L rises to the evicted priority so long-resident entries age out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from .cache import CacheEntry, CacheState
from .knowledge_base import Chunk


class PolicyKind(str, Enum):
    FIFO = "fifo"
    LRU = "lru"
    LFU = "lfu"
    SEMANTIC = "semantic"
    GDSF = "gdsf"
    ACC_DRL = "accdrl"


BASELINE_KINDS = (
    PolicyKind.FIFO,
    PolicyKind.LRU,
    PolicyKind.LFU,
    PolicyKind.SEMANTIC,
    PolicyKind.GDSF,
)


@dataclass
class ReplacementContext:
    """Read-only inputs of one admission decision."""

    prompt: np.ndarray
    candidate: Chunk
    similarity: float
    inflation: float = 0.0  # GDSF aging clock L


@dataclass
class AdmitDecision:
    admit: bool
    victims: list[int] = field(default_factory=list)
    new_inflation: float = 0.0

    @classmethod
    def skip(cls, inflation: float) -> "AdmitDecision":
        return cls(admit=False, victims=[], new_inflation=inflation)


def _entries(cache: CacheState | Mapping[int, CacheEntry]) -> Mapping[int, CacheEntry]:
    return cache.entries if isinstance(cache, CacheState) else cache

def _require_nonempty(entries: Mapping[int, CacheEntry]) -> None:
    if not entries:
        raise ValueError("cannot pick a victim from an empty cache")


def victim_fifo(cache: CacheState | Mapping[int, CacheEntry]) -> int:
    """Oldest insertion."""
    entries = _entries(cache)
    _require_nonempty(entries)
    return min(entries.values(), key=lambda e: e.insert_seq).chunk_id


def victim_lru(cache: CacheState | Mapping[int, CacheEntry]) -> int:
    """Least recently accessed."""
    entries = _entries(cache)
    _require_nonempty(entries)
    return min(entries.values(), key=lambda e: e.last_access_seq).chunk_id


def victim_lfu(cache: CacheState | Mapping[int, CacheEntry]) -> int:
    """Fewest hits; ties fall back to least recently accessed."""
    entries = _entries(cache)
    _require_nonempty(entries)
    return min(
        entries.values(), key=lambda e: (e.access_count, e.last_access_seq)
    ).chunk_id


def victim_semantic(
    cache: CacheState | Mapping[int, CacheEntry], prompt: np.ndarray
) -> int:
    """Least similar to the prompt; ties by ascending chunk id."""
    entries = _entries(cache)
    _require_nonempty(entries)
    return min(
        entries.values(),
        key=lambda e: (float(np.dot(prompt, e.embedding)), e.chunk_id),
    ).chunk_id


def _gdsf_priority(entry: CacheEntry, inflation: float) -> float:
    return inflation + entry.access_count * entry.relevance_score / entry.size_units


def victim_gdsf(
    cache: CacheState | Mapping[int, CacheEntry], inflation: float
) -> tuple[int, float]:
    """Minimum greedy-dual priority; returns (victim, advanced clock)."""
    entries = _entries(cache)
    _require_nonempty(entries)
    victim = min(
        entries.values(),
        key=lambda e: (_gdsf_priority(e, inflation), e.chunk_id),
    )
    return victim.chunk_id, _gdsf_priority(victim, inflation)


def victim_stalest(
    cache: CacheState | Mapping[int, CacheEntry], kb_versions: np.ndarray
) -> int:
    """Largest version lag behind the knowledge base; ties by LRU."""
    entries = _entries(cache)
    _require_nonempty(entries)
    return max(
        entries.values(),
        key=lambda e: (
            int(kb_versions[e.chunk_id]) - e.cached_version,
            -e.last_access_seq,
        ),
    ).chunk_id


def baseline_admit(
    kind: PolicyKind,
    cache: CacheState,
    ctx: ReplacementContext,
    theta_admit: float = 0.6,
) -> AdmitDecision:
    """Admission rule for the non-learned policies.

    FIFO/LRU/LFU/GDSF admit every candidate, evicting with their victim op
    until it fits. Semantic admits only candidates at least theta_admit
    similar to the prompt, and refuses to displace entries that are more
    relevant to the prompt than the candidate is.

    The decision is computed against a snapshot; the caller applies the
    evictions and the insert.
    """
    if kind == PolicyKind.ACC_DRL:
        raise ValueError("baseline_admit does not handle the learned policy")
    chunk = ctx.candidate
    inflation = ctx.inflation
    if chunk.size_units > cache.capacity_units:
        return AdmitDecision.skip(inflation)
    if kind == PolicyKind.SEMANTIC and ctx.similarity < theta_admit:
        return AdmitDecision.skip(inflation)

    free = cache.free_units
    if chunk.size_units <= free:
        return AdmitDecision(admit=True, victims=[], new_inflation=inflation)

    remaining = dict(cache.entries)
    victims: list[int] = []
    while chunk.size_units > free:
        if kind == PolicyKind.FIFO:
            victim = victim_fifo(remaining)
        elif kind == PolicyKind.LRU:
            victim = victim_lru(remaining)
        elif kind == PolicyKind.LFU:
            victim = victim_lfu(remaining)
        elif kind == PolicyKind.GDSF:
            victim, inflation = victim_gdsf(remaining, inflation)
        else:
            victim = victim_semantic(remaining, ctx.prompt)
            victim_sim = float(np.dot(ctx.prompt, remaining[victim].embedding))
            if ctx.similarity <= victim_sim:
                return AdmitDecision.skip(ctx.inflation)
        free += remaining[victim].size_units
        victims.append(victim)
        del remaining[victim]
    return AdmitDecision(admit=True, victims=victims, new_inflation=inflation)
