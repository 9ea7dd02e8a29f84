"""Decoder reachability on the misaligned environment.

For each seed: VED with the exact (oracle) value against width-16 beam search
on the SFT policy, then both decoders on a policy/value pair trained with VED
and the joint objective, at the 1x (33) and 4x (129) token budgets.

    python scripts/reachability.py --config configs/default.yaml --out runs
"""

import argparse
import dataclasses
from pathlib import Path

from sidtree.cli import write_csv
from sidtree.config import load_config
from sidtree.env import generate
from sidtree.experiments import oracle_reachability, reachability, train_variant


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.yaml")
    ap.add_argument("--out", default="runs")
    ap.add_argument("--contexts", type=int, default=300, help="held-out contexts per seed")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()

    cfg = load_config(args.config)
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    rows = []
    for seed in seeds:
        env, policy = generate(cfg.env.spec(seed), cfg.env.sizes)
        ctx = env.test_contexts[: args.contexts]
        rows.append({"seed": seed, "value": "oracle", **oracle_reachability(env, policy, ctx, 129, 16, seed)})
        rec = train_variant(env, policy, dataclasses.replace(cfg.loop, eval_every=cfg.loop.iterations), seed,
                            decoder="ved", objective="joint")
        for budget in (33, 129):
            rows.append({"seed": seed, "value": "trained",
                         **reachability(env, rec.policy, rec.value, ctx, budget, 16, seed)})
        for r in rows[-3:]:
            print({k: r[k] for k in ("seed", "value", "budget", "ved_found", "beam_found",
                                     "ved_hr@10", "beam_hr@10")}, flush=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "reachability.csv", rows)


if __name__ == "__main__":
    main()
