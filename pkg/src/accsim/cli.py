"""Experiment front door: run, replay, dump-corpus, dump-config.

``run`` executes every configured policy over identical seeded query
streams and writes, into the output directory:

* ``effective_config.txt`` - the fully resolved configuration (reloadable)
* ``results.csv`` - one row per (policy, episode):
  policy, episode, hit_rate, avg_latency_ms, overhead_units_per_miss,
  epsilon, loss_mean (the last two are empty for baselines)
* ``summary.txt`` - per-policy means over the last five episodes plus the
  query-stream hash each policy consumed
* ``workload_trace.jsonl`` - the workload trace for ``replay``
* ``accdrl_checkpoint.npz`` - trained Q-network, when the learned policy ran

``replay`` re-executes a saved trace against one policy (optionally a saved
checkpoint with a fixed exploration rate) and emits the same CSV schema.

Diagnostics go to stderr; verbosity follows the ACC_LOG_LEVEL environment
variable (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import (
    ExperimentConfig,
    build_config,
    format_config,
    parse_text,
    with_overrides,
)
from .drl import QNetwork
from .errors import ConfigurationError
from .knowledge_base import chunk_to_record
from .policies import PolicyKind
from .simulator import (
    EpisodeMetrics,
    Simulator,
    build_knowledge_base,
    episode_queries,
    resolve_capacity_units,
    run_experiment,
    run_policy_episodes,
)
from .workload import read_trace, write_trace

logger = logging.getLogger("accsim")

CSV_COLUMNS = (
    "policy",
    "episode",
    "hit_rate",
    "avg_latency_ms",
    "overhead_units_per_miss",
    "epsilon",
    "loss_mean",
)
SUMMARY_WINDOW = 5


def _fmt_float(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def _csv_rows(policy: str, metrics: list[EpisodeMetrics]) -> list[str]:
    rows = []
    for ep, m in enumerate(metrics):
        rows.append(
            ",".join(
                [
                    policy,
                    str(ep),
                    repr(m.hit_rate),
                    repr(m.avg_latency_ms),
                    repr(m.overhead_units_per_miss),
                    _fmt_float(m.epsilon),
                    _fmt_float(m.loss_mean),
                ]
            )
        )
    return rows


def write_results_csv(path: Path, policies: dict[str, list[EpisodeMetrics]]) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for policy, metrics in policies.items():
        lines.extend(_csv_rows(policy, metrics))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_summary(
    path: Path,
    policies: dict[str, list[EpisodeMetrics]],
    trace_hashes: dict[str, str],
    capacity_units: int,
) -> None:
    lines = [f"capacity_units = {capacity_units}"]
    for policy, metrics in policies.items():
        tail = metrics[-SUMMARY_WINDOW:]
        lines.append(
            f"{policy}.hit_rate_last{SUMMARY_WINDOW} = "
            f"{repr(sum(m.hit_rate for m in tail) / len(tail))}"
        )
        lines.append(
            f"{policy}.avg_latency_ms_last{SUMMARY_WINDOW} = "
            f"{repr(sum(m.avg_latency_ms for m in tail) / len(tail))}"
        )
        lines.append(
            f"{policy}.overhead_units_per_miss_last{SUMMARY_WINDOW} = "
            f"{repr(sum(m.overhead_units_per_miss for m in tail) / len(tail))}"
        )
        lines.append(f"{policy}.trace_sha256 = {trace_hashes[policy]}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_raw(config_path: str | None) -> dict[str, str]:
    if config_path is None:
        return {}
    with open(config_path, "r", encoding="utf-8") as fh:
        return parse_text(fh.read())


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    raw = _load_raw(args.config)
    return with_overrides(
        raw,
        seed=args.seed,
        policies=args.policies,
        episodes=args.episodes,
    )


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.txt").write_text(format_config(cfg), encoding="utf-8")

    kb = build_knowledge_base(cfg)
    logger.info(
        "corpus: %d chunks, %d units, capacity %d units",
        len(kb),
        kb.total_size_units,
        resolve_capacity_units(cfg, kb),
    )
    result = run_experiment(cfg, kb=kb)

    write_results_csv(out / "results.csv", result.policies)
    write_summary(
        out / "summary.txt", result.policies, result.trace_hashes, result.capacity_units
    )

    episodes = [episode_queries(cfg, kb, ep) for ep in range(cfg.episodes)]
    with open(out / "workload_trace.jsonl", "w", encoding="utf-8") as fh:
        write_trace(
            fh,
            {
                "config_text": format_config(cfg),
                "corpus_hash": kb.corpus_hash(),
                "episodes": cfg.episodes,
                "master_seed": cfg.master_seed,
            },
            episodes,
        )

    for policy, net in result.checkpoints.items():
        net.save(str(out / f"{policy}_checkpoint.npz"))
    logger.info("wrote results to %s", out)
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    with open(args.trace, "r", encoding="utf-8") as fh:
        header, rows = read_trace(fh)
    cfg = build_config(parse_text(header["config_text"]))
    kb = build_knowledge_base(cfg)
    if kb.corpus_hash() != header["corpus_hash"]:
        raise ConfigurationError(
            "trace/config mismatch: corpus hash differs from the trace header"
        )

    n_episodes = int(header["episodes"])
    episodes = [episode_queries(cfg, kb, ep) for ep in range(n_episodes)]
    by_episode: dict[int, list[dict]] = {}
    for row in rows:
        by_episode.setdefault(int(row["episode"]), []).append(row)
    for ep in range(n_episodes):
        got = sorted(by_episode.get(ep, []), key=lambda r: r["arrival_index"])
        if len(got) != len(episodes[ep]):
            raise ConfigurationError(f"trace episode {ep} has wrong row count")
        for row, q in zip(got, episodes[ep]):
            if (
                int(row["task_id"]) != q.task_id
                or [int(c) for c in row["target_chunk_ids"]] != list(q.target_chunk_ids)
            ):
                raise ConfigurationError(
                    f"trace row mismatch at episode {ep}, "
                    f"query {row['arrival_index']}: regenerated stream differs"
                )

    policy = PolicyKind(args.policy)
    sim = Simulator(
        kb,
        policy,
        cfg.latency,
        cfg.retrieval,
        cfg.theta_hit,
        theta_admit=cfg.theta_admit,
        hp=cfg.dqn,
        master_seed=cfg.master_seed,
    )
    if policy == PolicyKind.ACC_DRL:
        agent = sim.agent
        assert agent is not None
        if args.checkpoint:
            agent.net = QNetwork.load(args.checkpoint)
            agent.target_net = agent.net.clone()
            agent.trainable = False
        if args.epsilon is not None:
            agent.epsilon_override = float(args.epsilon)
    elif args.checkpoint:
        raise ConfigurationError("--checkpoint only applies to the accdrl policy")

    per_episode, trace_hash = run_policy_episodes(cfg, kb, sim, episodes)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results_csv(out / "results.csv", {policy.value: per_episode})
    write_summary(
        out / "summary.txt",
        {policy.value: per_episode},
        {policy.value: trace_hash},
        resolve_capacity_units(cfg, kb),
    )
    return 0


def cmd_dump_corpus(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    kb = build_knowledge_base(cfg)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "corpus.jsonl", "w", encoding="utf-8") as fh:
            kb.export_corpus(fh)
    else:
        for chunk in kb.chunks:
            sys.stdout.write(json.dumps(chunk_to_record(chunk)) + "\n")
    return 0


def cmd_dump_config(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    text = format_config(cfg)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective_config.txt").write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file (key = value lines)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="override master_seed")
    parser.add_argument("--policies", help="comma list of policies to run")
    parser.add_argument("--episodes", type=int, help="override episode count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="accsim",
        description="Adaptive contextual caching experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the configured experiment")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_replay = sub.add_parser("replay", help="replay a saved workload trace")
    p_replay.add_argument("trace", help="workload_trace.jsonl from a run")
    p_replay.add_argument("--policy", required=True, help="policy to replay with")
    p_replay.add_argument("--checkpoint", help="accdrl checkpoint (.npz)")
    p_replay.add_argument(
        "--epsilon", type=float, help="fixed exploration rate for accdrl"
    )
    p_replay.add_argument("--out", required=True, help="output directory")
    p_replay.set_defaults(func=cmd_replay)

    p_corpus = sub.add_parser("dump-corpus", help="write the corpus as JSONL")
    _add_common(p_corpus)
    p_corpus.set_defaults(func=cmd_dump_corpus)

    p_cfg = sub.add_parser("dump-config", help="print the effective config")
    _add_common(p_cfg)
    p_cfg.set_defaults(func=cmd_dump_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("ACC_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out", None) is None and args.command == "run":
        parser.error("run requires --out DIR")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
