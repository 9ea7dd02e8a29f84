"""Per-level Spearman correlation of log-prob and value with bucket reward.

Pools of 64 SIDs are drawn at temperature 1.5 from three policies: the SFT
policy, a beam+GRPO policy and a VED+joint policy (whose value is also
scored). An extra "oracle" variant samples from the SFT policy and scores the
exact expected reward, which checks the harness itself.

    python scripts/alignment.py --config configs/default.yaml --out runs
"""

import argparse
import dataclasses
from pathlib import Path

from sidtree.cli import write_csv
from sidtree.config import load_config
from sidtree.env import generate
from sidtree.experiments import alignment_rows, train_variant


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.yaml")
    ap.add_argument("--out", default="runs")
    ap.add_argument("--contexts", type=int, default=500)
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()

    cfg = load_config(args.config)
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    loop = dataclasses.replace(cfg.loop, eval_every=cfg.loop.iterations)
    rows = []
    for seed in seeds:
        env, policy = generate(cfg.env.spec(seed), cfg.env.sizes)
        beam = train_variant(env, policy, loop, seed, decoder="beam", objective="grpo")
        ved = train_variant(env, policy, loop, seed, decoder="ved", objective="joint")
        variants = {"sft": (policy, None), "beam_grpo": (beam.policy, None), "ved_joint": (ved.policy, ved.value)}
        got = alignment_rows(env, variants, env.test_contexts[: args.contexts], seed,
                             cfg.alignment.pool_size, cfg.alignment.temperature, oracle_of="sft")
        rows.extend(got)
        for r in got:
            print(seed, r["variant"], r["level"], r["signal"], round(r["rho"], 3), flush=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "alignment_study.csv", rows)


if __name__ == "__main__":
    main()
