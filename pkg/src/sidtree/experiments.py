"""Study drivers shared by the CLI, the scripts and the acceptance suite.

Each function runs one seed of one study and returns plain rows (dicts) that
serialize directly to CSV.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .core import ConfigError, substream
from .env import Environment, terminal_reward
from .evaluation import alignment_study, hr_at_k, lcp_diversity, ndcg_at_k
from .policy import PolicyTable, beam_cost, beam_search
from .train import LoopConfig, RunRecord, eval_checkpoint, run_loop
from .value import OracleValue
from .ved import VedConfig, ved_decode

SCALE_BUDGETS = (33, 65, 97, 129)


def width_for_budget(budget: int, L: int) -> int:
    """Beam width whose nominal cost 1 + (L-1) * width fits the budget."""
    return (budget - 1) // (L - 1)


def _decode_lists(env, policy, value, contexts, ved_cfg: VedConfig, width: int, seed: int):
    beams, veds = {}, {}
    for x in contexts:
        x = int(x)
        beams[x] = beam_search(policy, x, width)
        veds[x], _ = ved_decode(policy, value, x, ved_cfg, substream(seed, "eval-decode", x))
    return beams, veds


def reachability(
    env: Environment,
    policy: PolicyTable,
    value,
    contexts,
    budget: int = 129,
    width: int = 16,
    seed: int = 0,
    ks=(10,),
) -> dict:
    """How often each decoder's candidate set contains the ground truth, plus HR/NDCG@K.

    VED keeps ``width`` candidates, so both sets have the same size. VED lists
    are ranked in extraction order (value first); beam lists by log-prob.
    """
    cfg = VedConfig(budget=budget, output_size=width, init_width=min(8, width))
    beams, veds = _decode_lists(env, policy, value, contexts, cfg, width, seed)
    out = {"contexts": len(beams), "budget": budget, "width": width}
    for name, lists in (("beam", beams), ("ved", veds)):
        truths = [env.truth_sid(x) for x in lists]
        out[f"{name}_found"] = int(sum(t in c.sids for t, c in zip(truths, lists.values())))
        for k in ks:
            out[f"{name}_hr@{k}"] = float(np.mean([hr_at_k(c.sids, t, k) for t, c in zip(truths, lists.values())]))
            out[f"{name}_ndcg@{k}"] = float(np.mean([ndcg_at_k(c.sids, t, k) for t, c in zip(truths, lists.values())]))
        out[f"{name}_diversity"] = float(np.mean([lcp_diversity(c.sids) for c in lists.values()]))
        out[f"{name}_max_reward"] = float(np.mean([
            max(terminal_reward(env, x, y) for y in c.sids) for x, c in lists.items()
        ]))
        out[f"{name}_cost"] = float(np.mean([c.cost for c in lists.values()]))
    return out


def oracle_reachability(env, policy, contexts, budget=129, width=16, seed=0) -> dict:
    return reachability(env, policy, OracleValue(env, policy), contexts, budget, width, seed)


def train_variant(env, policy, loop: LoopConfig, seed: int, log=None, **changes) -> RunRecord:
    """Train a copy of ``policy`` under ``loop`` with field overrides."""
    ved_changes = changes.pop("ved", {})
    cfg = dataclasses.replace(
        loop, seed=seed, ved=dataclasses.replace(loop.ved, **ved_changes), **changes
    )
    return run_loop(env, policy.copy(), cfg=cfg, log=log)


def objective_ablation(env, policy, loop: LoopConfig, seed: int) -> list[dict]:
    rows = []
    for obj in ("grpo", "sibling", "joint"):
        rec = train_variant(env, policy, loop, seed, decoder="ved", objective=obj)
        rows.append({"axis": "objective", "variant": obj, "seed": seed, **rec.final})
    return rows


def decoder_ablation(env, policy, loop: LoopConfig, seed: int) -> list[dict]:
    rows = []
    for dec in ("beam", "topk", "ved"):
        rec = train_variant(env, policy, loop, seed, decoder=dec)
        last = rec.iterations[-1]
        rows.append({
            "axis": "decoder", "variant": dec, "seed": seed, **rec.final,
            "train_diversity": last.get("diversity", float("nan")),
            "train_max_reward": last.get("max_reward", float("nan")),
        })
    return rows


def rule_ablation(env, policy, loop: LoopConfig, seed: int) -> list[dict]:
    rows = []
    for rule in ("value", "entropy", "joint"):
        rec = train_variant(env, policy, loop, seed, decoder="ved", ved={"rule": rule})
        rows.append({"axis": "expansion-rule", "variant": rule, "seed": seed, **rec.final})
    return rows


ABLATIONS = {"decoder": decoder_ablation, "expansion-rule": rule_ablation, "objective": objective_ablation}


def scaling_study(env, policy, loop: LoopConfig, seed: int, budgets=SCALE_BUDGETS, base_width: int = 16) -> list[dict]:
    """Train with beam and with VED at each matched budget and evaluate held-out HR/NDCG.

    Beam runs at width (budget - 1) // (L - 1); VED runs at the budget itself
    and returns as many candidates as that beam width.
    """
    rows = []
    init_cost = beam_cost(env.V, env.L, loop.ved.init_width)
    for b in budgets:
        if b < init_cost:
            raise ConfigError(f"budget {b} below VED warm-start cost {init_cost}")
        w = width_for_budget(b, env.L)
        mult = (b - 1) // ((env.L - 1) * base_width)
        beam = train_variant(env, policy, loop, seed, decoder="beam", objective="grpo", beam_width=w)
        ved = train_variant(
            env, policy, loop, seed, decoder="ved", ved={"budget": b, "output_size": w}
        )
        for name, rec in (("beam", beam), ("ved", ved)):
            costs = [r["mean_cost"] for r in rec.iterations if "mean_cost" in r]
            rows.append({
                "method": name, "budget": b, "multiple": mult, "width": w, "seed": seed,
                "mean_cost": float(np.mean(costs)) if costs else 0.0, **rec.final,
            })
    return rows


def alignment_rows(
    env, variants: dict[str, tuple[PolicyTable, object]], contexts, seed=0, pool_size=64,
    temperature=1.5, oracle_of: str | None = None,
) -> list[dict]:
    """Spearman table over policy variants, each given as (policy, value or None).

    With ``oracle_of`` an extra "oracle" variant samples from that variant's
    policy and scores the exact expected reward at the sampling temperature.
    """
    policies = {k: p for k, (p, _) in variants.items()}
    values = {k: v for k, (_, v) in variants.items() if v is not None}
    if oracle_of is not None:
        pol = variants[oracle_of][0]
        policies["oracle"] = pol
        values["oracle"] = OracleValue(env, pol, temperature)
    rows = alignment_study(policies, values, env, contexts, pool_size, temperature, seed)
    for r in rows:
        r["seed"] = seed
    return rows


def held_out_eval(env, policy, contexts, ks=(3, 5, 10)) -> dict:
    return eval_checkpoint(env, policy, contexts, ks)
