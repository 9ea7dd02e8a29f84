"""Run the full desk-scale study through the CLI: environments, training runs,
the three ablation axes, the budget-scaling study and the aggregated report.

    python scripts/run_study.py --config configs/default.yaml --out runs
"""

import argparse
import sys
from pathlib import Path

from sidtree.cli import main as cli

RUNS = [("ved", "joint"), ("beam", "grpo")]
AXES = ["decoder", "expansion-rule", "objective"]


def step(argv):
    print("$ sidtree " + " ".join(argv), flush=True)
    code = cli(argv)
    if code:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.yaml")
    ap.add_argument("--out", default="runs")
    ap.add_argument("--seed", type=int, help="single seed instead of the config's list")
    ap.add_argument("--skip-scale", action="store_true", help="skip the (slowest) scaling study")
    args = ap.parse_args()

    common = ["--config", args.config, "--out", args.out]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]
    step(["gen-env", *common])
    for dec, obj in RUNS:
        step(["train", *common, "--set", f"loop.decoder={dec}", "--set", f"loop.objective={obj}"])
    for axis in AXES:
        step(["ablate", *common, "--axis", axis])
    if not args.skip_scale:
        step(["scale", *common])
    step(["report", str(Path(args.out)), "--out", str(Path(args.out) / "report")])


if __name__ == "__main__":
    main()
