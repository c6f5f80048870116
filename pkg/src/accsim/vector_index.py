"""In-memory HNSW index over unit vectors, with deletion and an exact-scan oracle.

The graph follows the usual layered small-world construction: each node is
assigned a geometric random level, lives in every layer up to that level,
and keeps at most ``M`` neighbors per layer (``2 * M`` at layer 0). Search
greedily descends the upper layers with a beam of one, then runs a
best-first beam of ``ef_search`` at layer 0.

Similarity is cosine; vectors are normalized on insert so scores are plain
dot products. Results are ordered by descending similarity with ties broken
by ascending id.

Deletion tombstones the node: it stays in the graph as navigation glue but
is filtered from results. Once more than half of the stored nodes are
tombstones the index rebuilds itself from the live entries (ascending id),
which bounds both memory and recall decay.

Snapshot format (see :meth:`HnswIndex.save`): little-endian, magic bytes
``ACCX``, u32 format version, i32 M, i32 ef_construction, i32 ef_search,
f64 level_lambda, u64 seed, u32 dim, u64 entry count, then per live entry
an i64 id followed by ``dim`` f64 components. Loading re-inserts the
entries in stored order; tombstones are compacted away by the snapshot.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigurationError

_MAGIC = b"ACCX"
_FORMAT_VERSION = 1
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class HnswParams:
    M: int = 16
    ef_construction: int = 100
    ef_search: int = 64
    level_lambda: float | None = None  # None derives the classic 1 / ln(M)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.M < 2:
            raise ConfigurationError(f"M must be >= 2, got {self.M}")
        if self.ef_construction < 1 or self.ef_search < 1:
            raise ConfigurationError("ef_construction and ef_search must be positive")
        if self.level_lambda is not None and self.level_lambda <= 0:
            raise ConfigurationError("level_lambda must be positive")

    @property
    def resolved_level_lambda(self) -> float:
        if self.level_lambda is not None:
            return self.level_lambda
        return 1.0 / math.log(self.M)


def _normalize(v: np.ndarray, dim: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (dim,):
        raise ValueError(f"expected vector of shape ({dim},), got {v.shape}")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("cannot index a zero vector")
    return v / norm


class HnswIndex:
    """Approximate nearest-neighbor index with tombstone deletion."""

    def __init__(self, dim: int, params: HnswParams | None = None):
        if dim < 1:
            raise ConfigurationError(f"dim must be positive, got {dim}")
        self.dim = dim
        self.params = params or HnswParams()
        self._ml = self.params.resolved_level_lambda
        self._rng = np.random.default_rng(
            np.random.SeedSequence(self.params.seed & _MASK64)
        )
        self._reset_storage()

    def _reset_storage(self) -> None:
        self._capacity = 64
        self._vectors = np.zeros((self._capacity, self.dim), dtype=np.float64)
        self._ext_ids: list[int] = []
        self._levels: list[int] = []
        self._neighbors: list[list[list[int]]] = []
        self._deleted = np.zeros(self._capacity, dtype=bool)
        self._visit_stamp = np.zeros(self._capacity, dtype=np.int64)
        self._stamp = 0
        self._id_to_node: dict[int, int] = {}
        self._entry: int | None = None
        self._max_level = -1
        self._garbage = 0

    # ------------------------------------------------------------------ helpers

    def __len__(self) -> int:
        return len(self._id_to_node)

    def __contains__(self, ext_id: int) -> bool:
        return ext_id in self._id_to_node

    @property
    def live_ids(self) -> list[int]:
        return sorted(self._id_to_node)

    def vector(self, ext_id: int) -> np.ndarray:
        """Normalized stored vector for a live id."""
        return self._vectors[self._id_to_node[ext_id]].copy()

    def _random_level(self) -> int:
        # geometric level: floor(-ln(U) * lambda), U in (0, 1]
        u = 1.0 - self._rng.random()
        return int(-math.log(u) * self._ml)

    def _grow(self) -> None:
        new_cap = self._capacity * 2
        vectors = np.zeros((new_cap, self.dim), dtype=np.float64)
        vectors[: self._capacity] = self._vectors
        self._vectors = vectors
        self._deleted = np.concatenate(
            [self._deleted, np.zeros(new_cap - self._capacity, dtype=bool)]
        )
        self._visit_stamp = np.concatenate(
            [self._visit_stamp, np.zeros(new_cap - self._capacity, dtype=np.int64)]
        )
        self._capacity = new_cap

    def _max_degree(self, layer: int) -> int:
        return 2 * self.params.M if layer == 0 else self.params.M

    # ------------------------------------------------------------- graph search

    def _search_layer(
        self, q: np.ndarray, entry_points: list[int], layer: int, ef: int
    ) -> list[tuple[float, int]]:
        """Best-first beam search in one layer.

        Returns up to ``ef`` (distance, node) pairs, ascending distance,
        where distance is the negated dot product with ``q``.
        """
        self._stamp += 1
        stamp = self._stamp
        stamps = self._visit_stamp
        stamps[entry_points] = stamp

        dists = -(self._vectors[entry_points] @ q)
        candidates: list[tuple[float, int]] = list(zip(dists.tolist(), entry_points))
        heapq.heapify(candidates)
        best = [(-d, n) for d, n in candidates]  # max-heap on distance
        heapq.heapify(best)
        while len(best) > ef:
            heapq.heappop(best)

        while candidates:
            dist, node = heapq.heappop(candidates)
            if len(best) >= ef and dist > -best[0][0]:
                break
            fresh = [
                n for n in self._neighbors[node][layer] if stamps[n] != stamp
            ]
            if not fresh:
                continue
            stamps[fresh] = stamp
            fresh_dists = -(self._vectors[fresh] @ q)
            bound = -best[0][0]
            for n, d in zip(fresh, fresh_dists.tolist()):
                if len(best) < ef:
                    heapq.heappush(candidates, (d, n))
                    heapq.heappush(best, (-d, n))
                    bound = -best[0][0]
                elif d < bound:
                    heapq.heappush(candidates, (d, n))
                    heapq.heapreplace(best, (-d, n))
                    bound = -best[0][0]

        out = [(-nd, n) for nd, n in best]
        out.sort()
        return out

    def _select_neighbors(
        self, candidates: list[tuple[float, int]], m: int
    ) -> list[int]:
        """Diversity-aware neighbor pick (closer to query than to any chosen)."""
        if len(candidates) <= m:
            return [n for _, n in candidates]
        chosen: list[int] = []
        discarded: list[tuple[float, int]] = []
        for dist, node in sorted(candidates):
            if len(chosen) >= m:
                break
            if not chosen:
                chosen.append(node)
                continue
            to_chosen = -(self._vectors[chosen] @ self._vectors[node])
            if dist < np.min(to_chosen):
                chosen.append(node)
            else:
                discarded.append((dist, node))
        for dist, node in discarded:
            if len(chosen) >= m:
                break
            chosen.append(node)
        return chosen

    # ---------------------------------------------------------------- mutation

    def insert(self, ext_id: int, v: np.ndarray) -> None:
        """Insert a vector under a new id. Duplicate live ids are rejected."""
        if ext_id in self._id_to_node:
            raise ValueError(f"id {ext_id} is already live in the index")
        vec = _normalize(v, self.dim)
        node = len(self._ext_ids)
        if node >= self._capacity:
            self._grow()
        level = self._random_level()
        self._vectors[node] = vec
        self._ext_ids.append(ext_id)
        self._levels.append(level)
        self._neighbors.append([[] for _ in range(level + 1)])
        self._id_to_node[ext_id] = node

        if self._entry is None:
            self._entry = node
            self._max_level = level
            return

        eps = [self._entry]
        for layer in range(self._max_level, level, -1):
            eps = [n for _, n in self._search_layer(vec, eps, layer, 1)]

        for layer in range(min(level, self._max_level), -1, -1):
            candidates = self._search_layer(
                vec, eps, layer, self.params.ef_construction
            )
            neighbors = self._select_neighbors(candidates, self.params.M)
            self._neighbors[node][layer] = list(neighbors)
            max_deg = self._max_degree(layer)
            for peer in neighbors:
                peer_list = self._neighbors[peer][layer]
                peer_list.append(node)
                if len(peer_list) > max_deg:
                    peer_vec = self._vectors[peer]
                    dists = -(self._vectors[peer_list] @ peer_vec)
                    pruned = self._select_neighbors(
                        list(zip(dists.tolist(), peer_list)), max_deg
                    )
                    self._neighbors[peer][layer] = pruned
            eps = [n for _, n in candidates]

        if level > self._max_level:
            self._entry = node
            self._max_level = level

    def remove(self, ext_id: int) -> None:
        """Tombstone a live id; rebuilds once tombstones exceed half the graph."""
        node = self._id_to_node.pop(ext_id, None)
        if node is None:
            raise ValueError(f"id {ext_id} is not live in the index")
        self._deleted[node] = True
        self._garbage += 1
        total = len(self._ext_ids)
        if total and self._garbage / total > 0.5:
            self._rebuild()

    def _rebuild(self) -> None:
        live = sorted(self._id_to_node)
        pairs = [(ext, self._vectors[self._id_to_node[ext]].copy()) for ext in live]
        self._reset_storage()
        for ext, vec in pairs:
            self.insert(ext, vec)

    # ------------------------------------------------------------------- query

    def search(self, q: np.ndarray, k: int) -> list[tuple[int, float]]:
        """Top-k live ids by cosine similarity, descending, ties by ascending id."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if not self._id_to_node:
            return []
        qv = _normalize(q, self.dim)
        ef = max(self.params.ef_search, k)
        eps = [self._entry]
        for layer in range(self._max_level, 0, -1):
            eps = [n for _, n in self._search_layer(qv, eps, layer, 1)]
        found = self._search_layer(qv, eps, 0, ef)
        results = [
            (self._ext_ids[n], -dist)
            for dist, n in found
            if not self._deleted[n]
        ]
        results.sort(key=lambda pair: (-pair[1], pair[0]))
        return results[:k]

    # -------------------------------------------------------------- persistence

    def save(self, path: str) -> None:
        """Write the live entries as a versioned binary snapshot."""
        p = self.params
        header = struct.pack(
            "<4sIiiidQIQ",
            _MAGIC,
            _FORMAT_VERSION,
            p.M,
            p.ef_construction,
            p.ef_search,
            p.resolved_level_lambda,
            p.seed & _MASK64,
            self.dim,
            len(self._id_to_node),
        )
        with open(path, "wb") as fh:
            fh.write(header)
            for ext in sorted(self._id_to_node):
                fh.write(struct.pack("<q", ext))
                fh.write(self._vectors[self._id_to_node[ext]].tobytes())

    @classmethod
    def load(cls, path: str) -> "HnswIndex":
        """Rebuild an index from a snapshot written by :meth:`save`."""
        header_size = struct.calcsize("<4sIiiidQIQ")
        with open(path, "rb") as fh:
            raw = fh.read(header_size)
            if len(raw) < header_size:
                raise ValueError("truncated index snapshot")
            magic, version, m, efc, efs, lam, seed, dim, count = struct.unpack(
                "<4sIiiidQIQ", raw
            )
            if magic != _MAGIC:
                raise ValueError(f"bad snapshot magic {magic!r}")
            if version != _FORMAT_VERSION:
                raise ValueError(f"unsupported snapshot version {version}")
            index = cls(
                dim,
                HnswParams(
                    M=m, ef_construction=efc, ef_search=efs, level_lambda=lam, seed=seed
                ),
            )
            vec_bytes = dim * 8
            for _ in range(count):
                (ext,) = struct.unpack("<q", fh.read(8))
                vec = np.frombuffer(fh.read(vec_bytes), dtype=np.float64)
                if vec.shape != (dim,):
                    raise ValueError("truncated index snapshot")
                index.insert(ext, vec)
        return index


def exact_search(
    entries: Mapping[int, np.ndarray] | Iterable[tuple[int, np.ndarray]],
    q: np.ndarray,
    k: int,
) -> list[tuple[int, float]]:
    """Linear-scan oracle with the same ordering contract as :meth:`search`."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    items = entries.items() if isinstance(entries, Mapping) else entries
    ids = []
    vecs = []
    for ext, v in items:
        ids.append(ext)
        vecs.append(v)
    if not ids:
        return []
    q = np.asarray(q, dtype=np.float64)
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ValueError("cannot search with a zero vector")
    matrix = np.asarray(vecs, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("cannot rank a zero vector")
    sims = (matrix @ q) / (norms * qn)
    ids_arr = np.asarray(ids)
    order = np.lexsort((ids_arr, -sims))[:k]
    return [(int(ids_arr[i]), float(sims[i])) for i in order]
