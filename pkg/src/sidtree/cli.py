"""Command-line entry point: gen-env, train, ablate, scale, report.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime error. Errors are
printed to stderr as one JSON object per line.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, dump_config, load_config
from .core import ConfigError
from .env import generate, load_env, misalignment_audit, save_env
from .experiments import ABLATIONS, alignment_rows, scaling_study
from .policy import save_policy
from .train import run_loop
from .value import ValueTable, save_value

OUT_ENV_VAR = "SIDTREE_OUT"
EXIT_CONFIG, EXIT_RUNTIME = 2, 3


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path: Path, rows: list[dict]) -> None:
    """CSV with the union of keys (first-seen order); floats written with repr."""
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in cols})
    path.write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def out_root(args, cfg: ExperimentConfig) -> Path:
    root = args.out or os.environ.get(OUT_ENV_VAR) or cfg.output_dir
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seeds(args, cfg: ExperimentConfig) -> list[int]:
    return [args.seed] if args.seed is not None else list(cfg.seeds)


def env_path(root: Path, seed: int) -> Path:
    return root / f"env_seed{seed}.npz"


def _load_seed_env(args, root: Path, seed: int):
    path = Path(args.env) if getattr(args, "env", None) else env_path(root, seed)
    if not path.exists():
        raise FileNotFoundError(f"environment file not found: {path} (run gen-env first)")
    return load_env(path)


def cmd_gen_env(args, cfg: ExperimentConfig) -> int:
    root = out_root(args, cfg)
    for seed in _seeds(args, cfg):
        env, policy = generate(cfg.env.spec(seed), cfg.env.sizes)
        path = env_path(root, seed)
        save_env(env, policy, path)
        audit = misalignment_audit(env, policy, cfg.env.q)
        print(json.dumps({"seed": seed, "path": str(path), **audit}, default=_json_default))
    (root / "config.yaml").write_text(dump_config(cfg))
    return 0


def cmd_train(args, cfg: ExperimentConfig) -> int:
    root = out_root(args, cfg)
    loop = cfg.loop
    for seed in _seeds(args, cfg):
        env, policy = _load_seed_env(args, root, seed)
        run_cfg = dataclasses.replace(loop, seed=seed)
        run_dir = root / f"train_{loop.decoder}_{loop.objective}_seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "metrics.jsonl", "w") as log:
            rec = run_loop(
                env, policy.copy(), cfg=run_cfg,
                log=lambda row: log.write(json.dumps(row, default=_json_default, sort_keys=True) + "\n"),
            )
        summary = [
            {"iteration": r["iteration"], "seed": seed, "decoder": loop.decoder,
             "objective": loop.objective, **r["eval"]}
            for r in rec.iterations if "eval" in r
        ]
        write_csv(run_dir / "summary.csv", summary)
        save_policy(rec.policy, run_dir / "policy.npz")
        if isinstance(rec.value, ValueTable):
            save_value(rec.value, run_dir / "value.npz")
        (run_dir / "config.yaml").write_text(dump_config(cfg))
        if cfg.alignment.contexts:
            ctx = env.test_contexts[: cfg.alignment.contexts]
            name = f"{loop.decoder}_{loop.objective}"
            rows = alignment_rows(
                env, {"sft": (policy, None), name: (rec.policy, rec.value)}, ctx, seed,
                cfg.alignment.pool_size, cfg.alignment.temperature, oracle_of="sft",
            )
            write_csv(run_dir / "alignment.csv", rows)
        print(json.dumps({"seed": seed, "run_dir": str(run_dir), **rec.final}, default=_json_default))
    return 0


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    root = out_root(args, cfg)
    fn = ABLATIONS[args.axis]
    rows = []
    for seed in _seeds(args, cfg):
        env, policy = _load_seed_env(args, root, seed)
        rows.extend(fn(env, policy, cfg.loop, seed))
    path = root / f"ablate_{args.axis}.csv"
    write_csv(path, rows)
    print(json.dumps({"axis": args.axis, "path": str(path), "rows": len(rows)}))
    return 0


def cmd_scale(args, cfg: ExperimentConfig) -> int:
    root = out_root(args, cfg)
    rows = []
    for seed in _seeds(args, cfg):
        env, policy = _load_seed_env(args, root, seed)
        rows.extend(scaling_study(env, policy, cfg.loop, seed, cfg.scale.budgets, cfg.scale.base_width))
    path = root / "scale.csv"
    write_csv(path, rows)
    print(json.dumps({"path": str(path), "rows": len(rows)}))
    return 0


KEY_COLUMNS = ("axis", "variant", "method", "budget", "multiple", "width", "decoder", "objective",
               "level", "signal", "iteration")


def _number(s: str) -> float | None:
    try:
        return float(s)
    except (TypeError, ValueError):
        return None


def aggregate(rows: list[dict], keep_last_iteration: bool = True) -> list[dict]:
    """Mean and sample std of every numeric column, grouped by the key columns."""
    if not rows:
        return []
    if keep_last_iteration and "iteration" in rows[0]:
        last: dict = {}
        for r in rows:
            k = (r.get("seed"), r.get("decoder"), r.get("objective"))
            if k not in last or int(r["iteration"]) >= int(last[k]["iteration"]):
                last[k] = r
        rows = list(last.values())
    keys = [c for c in KEY_COLUMNS if c in rows[0]]
    metrics = [
        c for c in rows[0]
        if c not in keys and c != "seed" and all(_number(r.get(c)) is not None for r in rows)
    ]
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r.get(k) for k in keys), []).append(r)
    out = []
    for gk, members in groups.items():
        row = dict(zip(keys, gk))
        row["n_seeds"] = len(members)
        for m in metrics:
            vals = np.array([_number(r[m]) for r in members])
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else ""
        out.append(row)
    return out


def cmd_report(args, cfg: ExperimentConfig) -> int:
    if not args.runs:
        raise ConfigError("report needs at least one run directory or CSV file")
    tables: dict[str, list[dict]] = {}
    for item in args.runs:
        p = Path(item)
        files = [p] if p.is_file() else sorted(p.rglob("*.csv"))
        for f in files:
            if f.name.startswith("report_"):
                continue
            tables.setdefault(f.stem, []).extend(read_csv(f))
    if not tables:
        raise ConfigError("no CSV tables found in the given runs")
    root = out_root(args, cfg)
    for name, rows in sorted(tables.items()):
        path = root / f"report_{name}.csv"
        write_csv(path, aggregate(rows))
        print(json.dumps({"table": name, "path": str(path), "input_rows": len(rows)}))
    return 0


COMMANDS = {
    "gen-env": cmd_gen_env, "train": cmd_train, "ablate": cmd_ablate,
    "scale": cmd_scale, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sidtree", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("--out", help=f"output root (default: ${OUT_ENV_VAR} or config output_dir)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. loop.iterations=5")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-env", parents=[common], help="generate and save environments")
    for name, text in (("train", "run the training loop"), ("scale", "budget-scaling study")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--env", help="environment file (default: <out>/env_seed<N>.npz)")
    p = sub.add_parser("ablate", parents=[common], help="run an ablation axis")
    p.add_argument("--axis", required=True, choices=sorted(ABLATIONS))
    p.add_argument("--env", help="environment file (default: <out>/env_seed<N>.npz)")
    p = sub.add_parser("report", parents=[common], help="aggregate CSV tables across runs")
    p.add_argument("runs", nargs="*", help="run directories or CSV files")
    return parser


def _error(kind: str, exc: BaseException) -> None:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        _error("config", e)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - every other failure maps to the runtime exit code
        _error("runtime", e)
        return EXIT_RUNTIME


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
