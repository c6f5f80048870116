"""Experiment configuration: flat key = value text with dotted section keys.

The format is deliberately simple: one ``key = value`` pair per line, full
line comments starting with ``#``, blank lines ignored. Every tunable has a
default, so an empty (or missing) file is a complete configuration. Unknown
and duplicate keys are rejected by name. The effective configuration, with
all defaults resolved, is echoed next to the results so a run's exact
inputs are always on disk and reloadable.

Values are ints, floats, booleans (``true`` / ``false``), comma lists of
ints (``size_choices``), or comma lists of policy names.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .drl import DqnHyperparams
from .embedding import EmbeddingParams
from .errors import ConfigurationError
from .knowledge_base import CorpusConfig, RetrievalParams
from .policies import PolicyKind
from .simulator import LatencyModel
from .vector_index import HnswParams


@dataclass(frozen=True)
class WorkloadConfig:
    n_tasks: int = 8
    n_queries: int = 200
    p_end: float = 0.5
    query_sigma: float = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int = 42
    episodes: int = 20
    policies: tuple[PolicyKind, ...] = (
        PolicyKind.FIFO,
        PolicyKind.LRU,
        PolicyKind.LFU,
        PolicyKind.SEMANTIC,
        PolicyKind.GDSF,
        PolicyKind.ACC_DRL,
    )
    corpus: CorpusConfig = dataclasses.field(default_factory=CorpusConfig)
    embedding: EmbeddingParams = dataclasses.field(default_factory=EmbeddingParams)
    hnsw: HnswParams = dataclasses.field(default_factory=HnswParams)
    retrieval: RetrievalParams = dataclasses.field(default_factory=RetrievalParams)
    theta_hit: float = 0.75
    theta_admit: float = 0.6
    exact_retrieval: bool = False
    cache_capacity_fraction: float = 0.15
    cache_capacity_units: int = 0  # 0 resolves the fraction against the corpus
    latency: LatencyModel = dataclasses.field(default_factory=LatencyModel)
    workload: WorkloadConfig = dataclasses.field(default_factory=WorkloadConfig)
    dqn: DqnHyperparams = dataclasses.field(default_factory=DqnHyperparams)


def _parse_bool(value: str) -> bool:
    if value == "true":
        return True
    if value == "false":
        return False
    raise ValueError(f"expected true or false, got {value!r}")


def _parse_int_list(value: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in value.split(",") if part.strip())


def _parse_policies(value: str) -> tuple[PolicyKind, ...]:
    names = [part.strip() for part in value.split(",") if part.strip()]
    if not names:
        raise ValueError("policy list is empty")
    kinds = []
    for name in names:
        try:
            kinds.append(PolicyKind(name))
        except ValueError:
            known = ",".join(k.value for k in PolicyKind)
            raise ValueError(f"unknown policy {name!r} (known: {known})") from None
    if len(set(kinds)) != len(kinds):
        raise ValueError("duplicate policy names")
    return tuple(kinds)


# key -> parser; the single source of truth for what the file may contain
_PARSERS = {
    "master_seed": int,
    "episodes": int,
    "policies": _parse_policies,
    "corpus.n_topics": int,
    "corpus.chunks_per_topic": int,
    "corpus.extraneous_fraction": float,
    "corpus.dynamic_fraction": float,
    "corpus.volatility_skew": float,
    "corpus.size_choices": _parse_int_list,
    "corpus.p_update": float,
    "embedding.dim": int,
    "embedding.noise_sigma": float,
    "embedding.master_seed": int,
    "hnsw.m": int,
    "hnsw.ef_construction": int,
    "hnsw.ef_search": int,
    "hnsw.level_lambda": float,
    "retrieval.top_k": int,
    "retrieval.candidate_m": int,
    "retrieval.theta_hit": float,
    "retrieval.theta_admit": float,
    "retrieval.exact": _parse_bool,
    "cache.capacity_fraction": float,
    "cache.capacity_units": int,
    "latency.t_cache_hit_ms": float,
    "latency.t_kb_retrieval_ms": float,
    "latency.t_per_unit_ms": float,
    "latency.concurrent_updates": _parse_bool,
    "workload.n_tasks": int,
    "workload.n_queries": int,
    "workload.p_end": float,
    "workload.query_sigma": float,
    "dqn.gamma": float,
    "dqn.epsilon_start": float,
    "dqn.epsilon_end": float,
    "dqn.epsilon_decay_steps": int,
    "dqn.replay_capacity": int,
    "dqn.batch_size": int,
    "dqn.learn_rate": float,
    "dqn.target_sync_every": int,
    "dqn.reward_window": int,
    "dqn.overhead_lambda": float,
}


def parse_text(text: str) -> dict[str, str]:
    """Raw key/value pairs from config text; rejects unknown and duplicate keys."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {lineno}: expected 'key = value': {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _PARSERS:
            raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
        if key in raw:
            raise ConfigurationError(f"line {lineno}: duplicate config key {key!r}")
        raw[key] = value
    return raw


def build_config(raw: dict[str, str]) -> ExperimentConfig:
    """Typed, validated config from raw pairs; defaults fill everything absent."""
    values: dict[str, object] = {}
    for key, text in raw.items():
        try:
            values[key] = _PARSERS[key](text)
        except (ValueError, ConfigurationError) as exc:
            raise ConfigurationError(f"config key {key!r}: {exc}") from None

    def get(key: str, default):
        return values.get(key, default)

    master_seed = get("master_seed", 42)
    try:
        corpus = CorpusConfig(
            n_topics=get("corpus.n_topics", 10),
            chunks_per_topic=get("corpus.chunks_per_topic", 50),
            extraneous_fraction=get("corpus.extraneous_fraction", 0.3),
            dynamic_fraction=get("corpus.dynamic_fraction", 0.4),
            volatility_skew=get("corpus.volatility_skew", 0.75),
            size_choices=get("corpus.size_choices", (1, 2, 3)),
            p_update=get("corpus.p_update", 0.02),
        )
        embedding = EmbeddingParams(
            dim=get("embedding.dim", 64),
            noise_sigma=get("embedding.noise_sigma", 0.3),
            master_seed=get("embedding.master_seed", master_seed),
        )
        m = get("hnsw.m", 16)
        hnsw = HnswParams(
            M=m,
            ef_construction=get("hnsw.ef_construction", 100),
            ef_search=get("hnsw.ef_search", 64),
            level_lambda=get(
                "hnsw.level_lambda", HnswParams(M=m).resolved_level_lambda
            ),
        )
        retrieval = RetrievalParams(
            top_k=get("retrieval.top_k", 10),
            candidate_m=get("retrieval.candidate_m", 24),
        )
        theta_hit = get("retrieval.theta_hit", 0.75)
        theta_admit = get("retrieval.theta_admit", 0.6)
        if not 0.0 < theta_hit < 1.0:
            raise ConfigurationError(
                f"retrieval.theta_hit must be in (0, 1), got {theta_hit}"
            )
        if not 0.0 <= theta_admit <= 1.0:
            raise ConfigurationError(
                f"retrieval.theta_admit must be in [0, 1], got {theta_admit}"
            )
        capacity_fraction = get("cache.capacity_fraction", 0.15)
        capacity_units = get("cache.capacity_units", 0)
        if not 0.0 < capacity_fraction <= 1.0:
            raise ConfigurationError(
                f"cache.capacity_fraction must be in (0, 1], got {capacity_fraction}"
            )
        if capacity_units < 0:
            raise ConfigurationError("cache.capacity_units must be >= 0")
        latency = LatencyModel(
            t_cache_hit=get("latency.t_cache_hit_ms", 5.0),
            t_kb_retrieval=get("latency.t_kb_retrieval_ms", 50.0),
            t_per_unit_transfer=get("latency.t_per_unit_ms", 2.0),
            acc_update_concurrent=get("latency.concurrent_updates", True),
        )
        workload = WorkloadConfig(
            n_tasks=get("workload.n_tasks", 8),
            n_queries=get("workload.n_queries", 200),
            p_end=get("workload.p_end", 0.5),
            query_sigma=get("workload.query_sigma", 0.2),
        )
        if workload.n_tasks < 1 or workload.n_queries < 1:
            raise ConfigurationError("workload.n_tasks and n_queries must be positive")
        if not 0.0 < workload.p_end <= 1.0:
            raise ConfigurationError(
                f"workload.p_end must be in (0, 1], got {workload.p_end}"
            )
        if workload.query_sigma < 0:
            raise ConfigurationError("workload.query_sigma must be non-negative")
        dqn = DqnHyperparams(
            gamma=get("dqn.gamma", 0.9),
            epsilon_start=get("dqn.epsilon_start", 1.0),
            epsilon_end=get("dqn.epsilon_end", 0.05),
            epsilon_decay_steps=get("dqn.epsilon_decay_steps", 2000),
            replay_capacity=get("dqn.replay_capacity", 10000),
            batch_size=get("dqn.batch_size", 32),
            learn_rate=get("dqn.learn_rate", 1e-3),
            target_sync_every=get("dqn.target_sync_every", 200),
            reward_window=get("dqn.reward_window", 5),
            overhead_lambda=get("dqn.overhead_lambda", 0.05),
        )
        episodes = get("episodes", 20)
        if episodes < 1:
            raise ConfigurationError(f"episodes must be >= 1, got {episodes}")
    except ConfigurationError:
        raise
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None

    return ExperimentConfig(
        master_seed=master_seed,
        episodes=episodes,
        policies=get("policies", ExperimentConfig().policies),
        corpus=corpus,
        embedding=embedding,
        hnsw=hnsw,
        retrieval=retrieval,
        theta_hit=theta_hit,
        theta_admit=theta_admit,
        exact_retrieval=get("retrieval.exact", False),
        cache_capacity_fraction=capacity_fraction,
        cache_capacity_units=capacity_units,
        latency=latency,
        workload=workload,
        dqn=dqn,
    )


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return build_config({})
    with open(path, "r", encoding="utf-8") as fh:
        return build_config(parse_text(fh.read()))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(
            v.value if isinstance(v, PolicyKind) else str(v) for v in value
        )
    return str(value)


def format_config(cfg: ExperimentConfig) -> str:
    """Effective config as reloadable text: load(format(cfg)) == cfg."""
    pairs = [
        ("master_seed", cfg.master_seed),
        ("episodes", cfg.episodes),
        ("policies", cfg.policies),
        ("corpus.n_topics", cfg.corpus.n_topics),
        ("corpus.chunks_per_topic", cfg.corpus.chunks_per_topic),
        ("corpus.extraneous_fraction", cfg.corpus.extraneous_fraction),
        ("corpus.dynamic_fraction", cfg.corpus.dynamic_fraction),
        ("corpus.volatility_skew", cfg.corpus.volatility_skew),
        ("corpus.size_choices", cfg.corpus.size_choices),
        ("corpus.p_update", cfg.corpus.p_update),
        ("embedding.dim", cfg.embedding.dim),
        ("embedding.noise_sigma", cfg.embedding.noise_sigma),
        ("embedding.master_seed", cfg.embedding.master_seed),
        ("hnsw.m", cfg.hnsw.M),
        ("hnsw.ef_construction", cfg.hnsw.ef_construction),
        ("hnsw.ef_search", cfg.hnsw.ef_search),
        ("hnsw.level_lambda", cfg.hnsw.resolved_level_lambda),
        ("retrieval.top_k", cfg.retrieval.top_k),
        ("retrieval.candidate_m", cfg.retrieval.candidate_m),
        ("retrieval.theta_hit", cfg.theta_hit),
        ("retrieval.theta_admit", cfg.theta_admit),
        ("retrieval.exact", cfg.exact_retrieval),
        ("cache.capacity_fraction", cfg.cache_capacity_fraction),
        ("cache.capacity_units", cfg.cache_capacity_units),
        ("latency.t_cache_hit_ms", cfg.latency.t_cache_hit),
        ("latency.t_kb_retrieval_ms", cfg.latency.t_kb_retrieval),
        ("latency.t_per_unit_ms", cfg.latency.t_per_unit_transfer),
        ("latency.concurrent_updates", cfg.latency.acc_update_concurrent),
        ("workload.n_tasks", cfg.workload.n_tasks),
        ("workload.n_queries", cfg.workload.n_queries),
        ("workload.p_end", cfg.workload.p_end),
        ("workload.query_sigma", cfg.workload.query_sigma),
        ("dqn.gamma", cfg.dqn.gamma),
        ("dqn.epsilon_start", cfg.dqn.epsilon_start),
        ("dqn.epsilon_end", cfg.dqn.epsilon_end),
        ("dqn.epsilon_decay_steps", cfg.dqn.epsilon_decay_steps),
        ("dqn.replay_capacity", cfg.dqn.replay_capacity),
        ("dqn.batch_size", cfg.dqn.batch_size),
        ("dqn.learn_rate", cfg.dqn.learn_rate),
        ("dqn.target_sync_every", cfg.dqn.target_sync_every),
        ("dqn.reward_window", cfg.dqn.reward_window),
        ("dqn.overhead_lambda", cfg.dqn.overhead_lambda),
    ]
    return "".join(f"{key} = {_fmt(value)}\n" for key, value in pairs)


def with_overrides(
    raw: dict[str, str],
    seed: int | None = None,
    policies: str | None = None,
    episodes: int | None = None,
) -> ExperimentConfig:
    """Apply CLI overrides at the raw-key level so resolution stays uniform."""
    merged = dict(raw)
    if seed is not None:
        merged["master_seed"] = str(seed)
    if policies is not None:
        merged["policies"] = policies
    if episodes is not None:
        merged["episodes"] = str(episodes)
    return build_config(merged)
