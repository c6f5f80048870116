"""The per-query caching loop, policy runners, and experiment orchestration.

Each query runs the same loop: look up the cache; on a miss, fetch the
top-k response set from the knowledge base (paying retrieval plus transfer
latency) and let the active policy update the cache; advance the knowledge
base one tick. Baselines admit the missed response chunks reactively. The
learned policy additionally retrieves a larger candidate set, featurizes
each candidate, and picks a replacement action per candidate, training its
Q-network online from windowed hit-rate rewards.

Cache-update transfers are charged to the overhead metric. By default they
run concurrently with knowledge-base retrieval and add nothing to query
latency; with concurrency off, units not already fetched for the response
are charged to latency as well. Baseline admissions only ever touch
response chunks, so the single fetch serves both purposes and never adds
latency.

Within one experiment every policy consumes the identical query stream and
identical knowledge-base version timeline (paired comparison); caches reset
at episode boundaries while the learned agent's parameters persist.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .cache import CacheState, MissCause
from .drl import (
    STATE_DIM,
    Action,
    DqnHyperparams,
    FeatureContext,
    QNetwork,
    ReplayBuffer,
    Transition,
    compute_reward,
    featurize,
    select_action,
    sync_target,
    train_step,
)
from .knowledge_base import Chunk, KnowledgeBase, RetrievalParams
from .policies import (
    PolicyKind,
    ReplacementContext,
    baseline_admit,
    victim_gdsf,
    victim_lru,
    victim_semantic,
    victim_stalest,
)
from .vector_index import HnswParams
from .workload import EpisodeSpec, Query, generate_episode

if TYPE_CHECKING:  # pragma: no cover
    from .config import ExperimentConfig

_MASK64 = (1 << 64) - 1

# seed-derivation tags; every stream a run consumes is keyed off the master
# seed with one of these, so paired policies see identical randomness
_TAG_CORPUS = 101
_TAG_KB_UPDATE = 102
_TAG_WORKLOAD = 103
_TAG_KB_INDEX = 104
_TAG_CACHE_INDEX = 105
_TAG_NET_INIT = 106
_TAG_ACTIONS = 107
_TAG_REPLAY = 108
_TAG_TRAIN = 109


def derive_seed(*parts: int) -> int:
    seq = np.random.SeedSequence([p & _MASK64 for p in parts])
    return int(seq.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class LatencyModel:
    t_cache_hit: float = 5.0
    t_kb_retrieval: float = 50.0
    t_per_unit_transfer: float = 2.0
    acc_update_concurrent: bool = True

    def __post_init__(self) -> None:
        if min(self.t_cache_hit, self.t_kb_retrieval, self.t_per_unit_transfer) < 0:
            raise ValueError("latency components must be non-negative")


@dataclass
class QueryRecord:
    arrival_index: int
    task_id: int
    hit: bool
    miss_cause: str | None
    latency_ms: float
    t1_units: int
    overhead_units: int


@dataclass
class EpisodeMetrics:
    hit_rate: float
    avg_latency_ms: float
    overhead_units_per_miss: float
    hits: int
    misses: int
    total_overhead_units: int
    records: list[QueryRecord]
    epsilon: float | None = None
    loss_mean: float | None = None


@dataclass
class ExperimentResult:
    policies: dict[str, list[EpisodeMetrics]]
    trace_hashes: dict[str, str]
    seeds: dict[str, int]
    capacity_units: int
    checkpoints: dict[str, QNetwork] = field(default_factory=dict)


# ------------------------------------------------------------- policy runners


class BaselinePolicyRunner:
    """Reactive admission of the missed response chunks."""

    def __init__(self, kind: PolicyKind, theta_admit: float):
        self.kind = kind
        self.theta_admit = theta_admit
        self.inflation = 0.0

    def begin_episode(self) -> None:
        self.inflation = 0.0

    def on_miss(
        self,
        cache: CacheState,
        kb: KnowledgeBase,
        query: Query,
        t1: list[tuple[Chunk, float]],
        candidates,
    ) -> tuple[int, int]:
        overhead = 0
        for chunk, sim in t1:
            if chunk.chunk_id in cache.entries:
                overhead += cache.refresh(chunk.chunk_id, chunk.version)
                continue
            ctx = ReplacementContext(
                prompt=query.prompt,
                candidate=chunk,
                similarity=sim,
                inflation=self.inflation,
            )
            decision = baseline_admit(self.kind, cache, ctx, self.theta_admit)
            self.inflation = decision.new_inflation
            if decision.admit:
                for victim in decision.victims:
                    cache.evict(victim)
                cache.insert(chunk, sim)
                overhead += chunk.size_units
        # the single response fetch also fills the cache: no extra latency
        return overhead, 0

    def on_query_end(self, task_id: int, hit: bool) -> None:
        pass

    def end_episode(self) -> tuple[float | None, float | None]:
        return None, None


@dataclass
class _OpenTransition:
    s: np.ndarray
    a: int
    r: float | None = None
    s_next: np.ndarray | None = None


@dataclass
class _DecisionBatch:
    """Decisions made during one query, rewarded by the consequence window.

    The window spans the task's next reward_window queries starting at the
    decision query itself, so an admission burst is scored against the hits
    it subsequently produces (minus the transfer penalty accrued inside the
    window).
    """

    transitions: list[_OpenTransition] = field(default_factory=list)
    count: int = 0
    hits: int = 0
    chunks: int = 0


class AccPolicyRunner:
    """DQN meta-policy: one replacement decision per retrieved candidate.

    Decisions made during one query share a reward: the task's hit rate over
    the following reward-window queries minus the transfer penalty accrued in
    that window. Each transition's next state is the featurization at the
    task's next decision point; transitions still open when the episode ends
    are flushed as terminal. Network parameters, replay contents, and the
    exploration schedule persist across episodes.
    """

    def __init__(self, kb: KnowledgeBase, hp: DqnHyperparams, master_seed: int):
        self.kb = kb
        self.hp = hp
        self.net = QNetwork(seed=derive_seed(master_seed, _TAG_NET_INIT))
        self.target_net = self.net.clone()
        self.buffer = ReplayBuffer(
            hp.replay_capacity, seed=derive_seed(master_seed, _TAG_REPLAY)
        )
        self.action_rng = np.random.default_rng(derive_seed(master_seed, _TAG_ACTIONS))
        self.train_rng = np.random.default_rng(derive_seed(master_seed, _TAG_TRAIN))
        self.action_steps = 0
        self.train_steps = 0
        self.inflation = 0.0
        self.batches: dict[int, list[_DecisionBatch]] = {}
        self.recent: deque[bool] = deque(maxlen=hp.reward_window)
        self.episode_losses: list[float] = []
        self.trainable = True  # replay evaluation freezes the net
        self.epsilon_override: float | None = None

    def begin_episode(self) -> None:
        self.inflation = 0.0
        self.batches = {}
        self.recent = deque(maxlen=self.hp.reward_window)
        self.episode_losses = []

    def _recent_hit_rate(self) -> float:
        return sum(self.recent) / len(self.recent) if self.recent else 0.0

    def _flush_ready(self, task_id: int) -> None:
        remaining_batches = []
        for batch in self.batches.get(task_id, []):
            still_open = []
            for rec in batch.transitions:
                if rec.r is not None and rec.s_next is not None:
                    self.buffer.push(
                        Transition(rec.s, rec.a, rec.r, rec.s_next, terminal=False)
                    )
                else:
                    still_open.append(rec)
            batch.transitions = still_open
            if batch.transitions or batch.count < self.hp.reward_window:
                remaining_batches.append(batch)
        if task_id in self.batches:
            self.batches[task_id] = remaining_batches

    def _apply_action(
        self,
        cache: CacheState,
        chunk: Chunk,
        sim: float,
        action: int,
        prompt: np.ndarray,
        t1_ids: set[int],
    ) -> tuple[int, int]:
        """Returns (units transferred, units charged to latency if sequential)."""
        if action == Action.SKIP:
            return 0, 0
        cid = chunk.chunk_id
        if cid in cache.entries:
            transferred = cache.refresh(cid, chunk.version)
        else:
            if chunk.size_units > cache.capacity_units:
                return 0, 0
            while chunk.size_units > cache.free_units:
                if action == Action.ADMIT_EVICT_LRU:
                    victim = victim_lru(cache)
                elif action == Action.ADMIT_EVICT_LEAST_SIMILAR:
                    victim = victim_semantic(cache, prompt)
                elif action == Action.ADMIT_EVICT_STALEST:
                    victim = victim_stalest(cache, self.kb.versions)
                else:
                    victim, self.inflation = victim_gdsf(cache, self.inflation)
                cache.evict(victim)
            cache.insert(chunk, sim)
            transferred = chunk.size_units
        sequential_units = 0 if cid in t1_ids else transferred
        return transferred, sequential_units

    def on_miss(
        self,
        cache: CacheState,
        kb: KnowledgeBase,
        query: Query,
        t1: list[tuple[Chunk, float]],
        candidates: list[tuple[Chunk, float]],
    ) -> tuple[int, int]:
        task_batches = self.batches.setdefault(query.task_id, [])
        batch = _DecisionBatch()
        task_batches.append(batch)
        t1_ids = {chunk.chunk_id for chunk, _ in t1}
        ctx = FeatureContext(
            kb_versions=kb.versions,
            reserved_anchors=kb.reserved_anchor_matrix,
            max_size_units=kb.max_size_units,
            recent_hit_rate=self._recent_hit_rate(),
        )
        overhead = 0
        sequential_units = 0
        chunks_moved = 0
        n = len(candidates)
        for rank, (chunk, sim) in enumerate(candidates):
            s = featurize(query.prompt, cache, chunk, sim, rank, n, ctx)
            for other in task_batches:
                for rec in other.transitions:
                    if rec.s_next is None:
                        rec.s_next = s
            self._flush_ready(query.task_id)
            if self.epsilon_override is not None:
                epsilon = self.epsilon_override
            else:
                epsilon = self.hp.epsilon_at(self.action_steps)
            action = select_action(self.net, s, epsilon, self.action_rng)
            self.action_steps += 1
            units, seq_units = self._apply_action(
                cache, chunk, sim, action, query.prompt, t1_ids
            )
            overhead += units
            sequential_units += seq_units
            if units > 0:
                chunks_moved += 1
            batch.transitions.append(_OpenTransition(s=s, a=action))
        self._query_chunks_moved = chunks_moved
        return overhead, sequential_units

    def on_query_end(self, task_id: int, hit: bool) -> None:
        self.recent.append(hit)
        chunks_moved = getattr(self, "_query_chunks_moved", 0)
        self._query_chunks_moved = 0
        w = self.hp.reward_window
        for batch in self.batches.get(task_id, []):
            if batch.count >= w:
                continue
            batch.count += 1
            batch.hits += int(hit)
            batch.chunks += chunks_moved
            if batch.count >= w:
                reward = compute_reward(
                    batch.hits, batch.count, batch.chunks, self.hp.overhead_lambda
                )
                for rec in batch.transitions:
                    rec.r = reward
        self._flush_ready(task_id)
        if not self.trainable:
            return
        loss = train_step(self.net, self.target_net, self.buffer, self.hp, self.train_rng)
        if loss is not None:
            self.episode_losses.append(loss)
            self.train_steps += 1
            if self.train_steps % self.hp.target_sync_every == 0:
                sync_target(self.net, self.target_net)

    def end_episode(self) -> tuple[float | None, float | None]:
        zero_state = np.zeros(STATE_DIM)
        for task_batches in self.batches.values():
            for batch in task_batches:
                if batch.transitions and batch.transitions[0].r is None:
                    # partial consequence window at episode end
                    reward = compute_reward(
                        batch.hits,
                        max(batch.count, 1),
                        batch.chunks,
                        self.hp.overhead_lambda,
                    )
                    for rec in batch.transitions:
                        rec.r = reward
                for rec in batch.transitions:
                    self.buffer.push(
                        Transition(
                            rec.s,
                            rec.a,
                            rec.r,
                            rec.s_next if rec.s_next is not None else zero_state,
                            terminal=rec.s_next is None,
                        )
                    )
        self.batches = {}
        if self.epsilon_override is not None:
            epsilon = self.epsilon_override
        else:
            epsilon = self.hp.epsilon_at(self.action_steps)
        loss_mean = (
            float(np.mean(self.episode_losses)) if self.episode_losses else None
        )
        return epsilon, loss_mean


# ----------------------------------------------------------------- simulation


class Simulator:
    """Runs the caching loop for one policy over episodes of queries."""

    def __init__(
        self,
        kb: KnowledgeBase,
        policy: PolicyKind,
        latency: LatencyModel,
        retrieval: RetrievalParams,
        theta_hit: float,
        theta_admit: float = 0.6,
        hp: DqnHyperparams | None = None,
        master_seed: int = 0,
    ):
        self.kb = kb
        self.policy = policy
        self.latency = latency
        self.retrieval = retrieval
        self.theta_hit = theta_hit
        if policy == PolicyKind.ACC_DRL:
            self.runner: AccPolicyRunner | BaselinePolicyRunner = AccPolicyRunner(
                kb, hp or DqnHyperparams(), master_seed
            )
        else:
            self.runner = BaselinePolicyRunner(policy, theta_admit)

    @property
    def agent(self) -> AccPolicyRunner | None:
        return self.runner if isinstance(self.runner, AccPolicyRunner) else None

    def run_query(
        self,
        query: Query,
        cache: CacheState,
        precomputed: list[tuple[int, float]] | None = None,
    ) -> QueryRecord:
        lat = self.latency
        result = cache.lookup(
            query.prompt, self.retrieval, self.theta_hit, self.kb.versions
        )
        if result.is_hit:
            record = QueryRecord(
                arrival_index=query.arrival_index,
                task_id=query.task_id,
                hit=True,
                miss_cause=None,
                latency_ms=lat.t_cache_hit,
                t1_units=0,
                overhead_units=0,
            )
        else:
            if precomputed is None:
                ranked = self.kb._ranked(query.prompt, self.retrieval.candidate_m)
            else:
                ranked = precomputed
            pairs = [(self.kb.chunk(cid), sim) for cid, sim in ranked]
            t1 = pairs[: self.retrieval.top_k]
            t1_units = sum(chunk.size_units for chunk, _ in t1)
            latency_ms = lat.t_kb_retrieval + t1_units * lat.t_per_unit_transfer
            candidates = pairs if self.policy == PolicyKind.ACC_DRL else []
            overhead, sequential_units = self.runner.on_miss(
                cache, self.kb, query, t1, candidates
            )
            if not lat.acc_update_concurrent:
                latency_ms += sequential_units * lat.t_per_unit_transfer
            record = QueryRecord(
                arrival_index=query.arrival_index,
                task_id=query.task_id,
                hit=False,
                miss_cause=result.miss_cause.value if result.miss_cause else None,
                latency_ms=latency_ms,
                t1_units=t1_units,
                overhead_units=overhead,
            )
        self.runner.on_query_end(query.task_id, record.hit)
        return record

    def run_episode(
        self,
        queries: list[Query],
        cache: CacheState,
        kb_update_rng: np.random.Generator,
        precomputed: dict[int, list[tuple[int, float]]] | None = None,
    ) -> EpisodeMetrics:
        self.kb.set_update_rng(kb_update_rng)
        self.runner.begin_episode()
        records = []
        for query in queries:
            pre = precomputed.get(query.arrival_index) if precomputed else None
            records.append(self.run_query(query, cache, pre))
            self.kb.advance_time(1)
        epsilon, loss_mean = self.runner.end_episode()

        n = len(records)
        hits = sum(r.hit for r in records)
        misses = n - hits
        total_overhead = sum(r.overhead_units for r in records)
        return EpisodeMetrics(
            hit_rate=hits / n if n else 0.0,
            avg_latency_ms=sum(r.latency_ms for r in records) / n if n else 0.0,
            overhead_units_per_miss=total_overhead / misses if misses else 0.0,
            hits=hits,
            misses=misses,
            total_overhead_units=total_overhead,
            records=records,
            epsilon=epsilon,
            loss_mean=loss_mean,
        )


def stream_hash(queries: list[Query]) -> str:
    h = hashlib.sha256()
    for q in queries:
        h.update(f"{q.arrival_index},{q.task_id}:".encode())
        h.update(np.asarray(q.prompt, dtype=np.float64).tobytes())
        h.update(",".join(map(str, q.target_chunk_ids)).encode())
    return h.hexdigest()


def resolve_capacity_units(cfg: "ExperimentConfig", kb: KnowledgeBase) -> int:
    if cfg.cache_capacity_units > 0:
        return cfg.cache_capacity_units
    return max(1, int(round(cfg.cache_capacity_fraction * kb.total_size_units)))


def build_knowledge_base(cfg: "ExperimentConfig") -> KnowledgeBase:
    from .knowledge_base import generate_corpus

    corpus_seed = derive_seed(cfg.master_seed, _TAG_CORPUS)
    chunks = generate_corpus(cfg.corpus, cfg.embedding, corpus_seed)
    kb_params = HnswParams(
        M=cfg.hnsw.M,
        ef_construction=cfg.hnsw.ef_construction,
        ef_search=cfg.hnsw.ef_search,
        level_lambda=cfg.hnsw.level_lambda,
        seed=derive_seed(cfg.master_seed, _TAG_KB_INDEX),
    )
    return KnowledgeBase(
        chunks,
        cfg.embedding,
        cfg.corpus,
        hnsw_params=kb_params,
        exact=cfg.exact_retrieval,
    )


def episode_queries(cfg: "ExperimentConfig", kb: KnowledgeBase, episode: int) -> list[Query]:
    spec = EpisodeSpec(
        n_queries=cfg.workload.n_queries,
        n_tasks=cfg.workload.n_tasks,
        p_end=cfg.workload.p_end,
        query_sigma=cfg.workload.query_sigma,
        seed=derive_seed(cfg.master_seed, _TAG_WORKLOAD, episode),
    )
    return generate_episode(spec, kb, cfg.retrieval)


def episode_cache(cfg: "ExperimentConfig", capacity: int, episode: int) -> CacheState:
    """Fresh per-episode cache; index seed depends only on (master seed, episode)."""
    return CacheState(
        capacity,
        cfg.embedding.dim,
        HnswParams(
            M=cfg.hnsw.M,
            ef_construction=cfg.hnsw.ef_construction,
            ef_search=cfg.hnsw.ef_search,
            level_lambda=cfg.hnsw.level_lambda,
            seed=derive_seed(cfg.master_seed, _TAG_CACHE_INDEX, episode),
        ),
    )


def episode_update_rng(cfg: "ExperimentConfig", episode: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(cfg.master_seed, _TAG_KB_UPDATE, episode))


def run_policy_episodes(
    cfg: "ExperimentConfig",
    kb: KnowledgeBase,
    sim: Simulator,
    episodes: list[list[Query]],
    precomputed: list[dict[int, list[tuple[int, float]]]] | None = None,
) -> tuple[list[EpisodeMetrics], str]:
    """One policy over the given episodes; caches and versions reset per episode."""
    capacity = resolve_capacity_units(cfg, kb)
    per_episode = []
    h = hashlib.sha256()
    for ep, queries in enumerate(episodes):
        kb.reset_versions()
        per_episode.append(
            sim.run_episode(
                queries,
                episode_cache(cfg, capacity, ep),
                episode_update_rng(cfg, ep),
                precomputed[ep] if precomputed else None,
            )
        )
        h.update(stream_hash(queries).encode())
    return per_episode, h.hexdigest()


def run_experiment(
    cfg: "ExperimentConfig", kb: KnowledgeBase | None = None
) -> ExperimentResult:
    """Run every configured policy over the same seeded episode streams."""
    if kb is None:
        kb = build_knowledge_base(cfg)
    capacity = resolve_capacity_units(cfg, kb)

    episodes: list[list[Query]] = []
    precomputed: list[dict[int, list[tuple[int, float]]]] = []
    for ep in range(cfg.episodes):
        queries = episode_queries(cfg, kb, ep)
        episodes.append(queries)
        # retrieval is a pure function of the corpus, so the ranked lists are
        # shared by every policy (the top_k response set is a prefix)
        precomputed.append(
            {
                q.arrival_index: kb._ranked(q.prompt, cfg.retrieval.candidate_m)
                for q in queries
            }
        )

    policies: dict[str, list[EpisodeMetrics]] = {}
    trace_hashes: dict[str, str] = {}
    checkpoints: dict[str, QNetwork] = {}
    for kind in cfg.policies:
        sim = Simulator(
            kb,
            kind,
            cfg.latency,
            cfg.retrieval,
            cfg.theta_hit,
            theta_admit=cfg.theta_admit,
            hp=cfg.dqn,
            master_seed=cfg.master_seed,
        )
        per_episode, trace_hash = run_policy_episodes(
            cfg, kb, sim, episodes, precomputed
        )
        policies[kind.value] = per_episode
        trace_hashes[kind.value] = trace_hash
        if sim.agent is not None:
            checkpoints[kind.value] = sim.agent.net.clone()

    return ExperimentResult(
        policies=policies,
        trace_hashes=trace_hashes,
        seeds={"master_seed": cfg.master_seed},
        capacity_units=capacity,
        checkpoints=checkpoints,
    )
