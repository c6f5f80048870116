"""Sweep helper: run the default experiment and print acceptance-style margins.

Usage:
    python3 scripts/tune_defaults.py --seeds 101,102 [key=value ...]

Extra positional key=value pairs are merged into the config (same keys as
the config file). Prints, per seed, the last-5-episode means per policy and
the margins the acceptance gate cares about.
"""

from __future__ import annotations

import argparse
import sys
import time

from accsim.config import build_config
from accsim.simulator import build_knowledge_base, run_experiment

TAIL = 5


def tail_mean(values):
    tail = values[-TAIL:]
    return sum(tail) / len(tail)


def run_one(seed: int, overrides: dict[str, str]) -> dict:
    raw = dict(overrides)
    raw["master_seed"] = str(seed)
    cfg = build_config(raw)
    kb = build_knowledge_base(cfg)
    t0 = time.time()
    result = run_experiment(cfg, kb=kb)
    elapsed = time.time() - t0
    summary = {}
    for policy, eps in result.policies.items():
        summary[policy] = {
            "hit": tail_mean([m.hit_rate for m in eps]),
            "lat": tail_mean([m.avg_latency_ms for m in eps]),
            "ovh": tail_mean([m.overhead_units_per_miss for m in eps]),
            "curve": [round(m.hit_rate, 3) for m in eps],
        }
    summary["_elapsed"] = elapsed
    summary["_capacity"] = result.capacity_units
    return summary


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--seeds", default="101,102")
    parser.add_argument("overrides", nargs="*", help="config key=value pairs")
    args = parser.parse_args()
    overrides = {}
    for pair in args.overrides:
        key, _, value = pair.partition("=")
        overrides[key.strip()] = value.strip()

    baselines = ("fifo", "lru", "lfu", "semantic", "gdsf")
    for seed in [int(s) for s in args.seeds.split(",")]:
        s = run_one(seed, overrides)
        acc = s.get("accdrl")
        print(f"== seed {seed}  capacity={s['_capacity']}  {s['_elapsed']:.0f}s ==")
        for policy in (*baselines, "accdrl"):
            if policy not in s:
                continue
            row = s[policy]
            print(
                f"  {policy:<9} hit={row['hit']:.3f} lat={row['lat']:6.2f} "
                f"ovh={row['ovh']:6.2f}  curve={row['curve']}"
            )
        if acc:
            best_base = max(s[p]["hit"] for p in baselines if p in s)
            sem = s.get("semantic")
            print(
                f"  margins: acc_hit={acc['hit']:.3f} "
                f"gap_best={acc['hit'] - best_base:+.3f} "
                + (f"gap_semantic={acc['hit'] - sem['hit']:+.3f} " if sem else "")
                + f"lat_vs_fifo={1 - acc['lat'] / s['fifo']['lat']:+.2%} "
                f"ovh_ratios="
                + ",".join(
                    f"{p}:{acc['ovh'] / s[p]['ovh']:.2f}"
                    for p in ("fifo", "lru", "semantic")
                    if p in s
                )
            )
    return 0


if __name__ == "__main__":
    sys.exit(main())
