"""Task-session query generator with controllable locality.

Queries arrive in sessions: each session samples a task uniformly, then
emits a geometric(p_end)-length run of prompts embedded near the task's
topic anchor with a query-specific noise level. Small p_end means long
bursts of one task; p_end = 1 degenerates to independent task draws.

Every query records its exact-search ground-truth top-k chunk ids, which
drives trace audits and replay verification (hit accounting itself is
similarity-based and lives in the cache module).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np

from .embedding import EmbeddingParams, embed
from .errors import ConfigurationError
from .knowledge_base import KnowledgeBase, RetrievalParams

TRACE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Task:
    task_id: int
    topic_id: int
    chunk_pool: tuple[int, ...]


@dataclass(frozen=True)
class Query:
    prompt: np.ndarray
    task_id: int
    arrival_index: int
    target_chunk_ids: tuple[int, ...]
    session_index: int


@dataclass(frozen=True)
class EpisodeSpec:
    n_queries: int = 200
    n_tasks: int = 8
    p_end: float = 0.5
    query_sigma: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_queries < 1:
            raise ConfigurationError(f"n_queries must be >= 1, got {self.n_queries}")
        if self.n_tasks < 1:
            raise ConfigurationError(f"n_tasks must be >= 1, got {self.n_tasks}")
        if not 0.0 < self.p_end <= 1.0:
            raise ConfigurationError(f"p_end must be in (0, 1], got {self.p_end}")
        if self.query_sigma < 0:
            raise ConfigurationError("query_sigma must be non-negative")


def build_tasks(kb: KnowledgeBase, n_tasks: int) -> list[Task]:
    """One task per domain topic, never touching reserved extraneous topics."""
    topics = kb.domain_topic_ids
    if not topics or n_tasks > len(topics):
        raise ConfigurationError(
            f"cannot build {n_tasks} tasks from {len(topics)} domain topics"
        )
    tasks = []
    for tid in range(n_tasks):
        topic = topics[tid]
        pool = tuple(
            c.chunk_id
            for c in kb.chunks
            if c.topic_id == topic and not c.extraneous
        )
        tasks.append(Task(task_id=tid, topic_id=topic, chunk_pool=pool))
    return tasks


def ground_truth_top_k(kb: KnowledgeBase, prompt: np.ndarray, k: int) -> tuple[int, ...]:
    """Exact-search oracle labels, independent of the approximate index."""
    return tuple(cid for cid, _ in kb.exact_ranked(prompt, k))


def generate_episode(
    spec: EpisodeSpec, kb: KnowledgeBase, params: RetrievalParams
) -> list[Query]:
    """Deterministic session-structured query stream of exactly n_queries."""
    tasks = build_tasks(kb, spec.n_tasks)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed & ((1 << 64) - 1)))
    query_params = EmbeddingParams(
        dim=kb.embed_params.dim,
        noise_sigma=spec.query_sigma,
        master_seed=kb.embed_params.master_seed,
    )
    queries: list[Query] = []
    session = 0
    while len(queries) < spec.n_queries:
        task = tasks[int(rng.integers(len(tasks)))]
        run = int(rng.geometric(spec.p_end))
        for _ in range(min(run, spec.n_queries - len(queries))):
            item_seed = int(rng.integers(1 << 62))
            prompt = embed(task.topic_id, item_seed, query_params)
            queries.append(
                Query(
                    prompt=prompt,
                    task_id=task.task_id,
                    arrival_index=len(queries),
                    target_chunk_ids=ground_truth_top_k(kb, prompt, params.top_k),
                    session_index=session,
                )
            )
        session += 1
    return queries


# ------------------------------------------------------------------ trace files


def write_trace(
    fh: IO[str],
    header: dict,
    episodes: Iterable[list[Query]],
) -> None:
    """Line-delimited trace: a header record, then one row per query."""
    fh.write(
        json.dumps({"kind": "acc_workload_trace", "format_version": TRACE_FORMAT_VERSION, **header})
        + "\n"
    )
    for ep_index, queries in enumerate(episodes):
        for q in queries:
            fh.write(
                json.dumps(
                    {
                        "episode": ep_index,
                        "arrival_index": q.arrival_index,
                        "task_id": q.task_id,
                        "target_chunk_ids": list(q.target_chunk_ids),
                    }
                )
                + "\n"
            )


def read_trace(lines: Iterable[str]) -> tuple[dict, list[dict]]:
    it = iter(lines)
    try:
        header = json.loads(next(it))
    except StopIteration:
        raise ValueError("empty trace file") from None
    if header.get("kind") != "acc_workload_trace":
        raise ValueError("not a workload trace file")
    if header.get("format_version") != TRACE_FORMAT_VERSION:
        raise ValueError(f"unsupported trace version {header.get('format_version')}")
    rows = []
    for line in it:
        if line.strip():
            rows.append(json.loads(line))
    return header, rows
