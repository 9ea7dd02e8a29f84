"""Ranking metrics, candidate-set diagnostics and the value/reward alignment study."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import EmptyBucket, Prefix, Sid, lcp_len, prefix_index, substream
from .env import Environment, terminal_reward
from .policy import CandidateSet, PolicyTable, topk_sample
from .value import ValueEstimator, prefix_bucket


def _check_list(ranked, K: int) -> None:
    if K < 1:
        raise ValueError("K must be >= 1")
    if len(ranked) < K:
        raise ValueError(f"ranked list has {len(ranked)} entries, fewer than K={K}")


def _rank_of(ranked, y_star) -> int | None:
    y_star = tuple(y_star)
    for i, y in enumerate(ranked):
        if tuple(y) == y_star:
            return i + 1
    return None


def hr_at_k(ranked, y_star, K: int) -> int:
    _check_list(ranked, K)
    r = _rank_of(ranked[:K], y_star)
    return int(r is not None)


def ndcg_at_k(ranked, y_star, K: int) -> float:
    """Single-relevant-item NDCG: 1/log2(rank+1) inside the top K, else 0."""
    _check_list(ranked, K)
    r = _rank_of(ranked[:K], y_star)
    return 0.0 if r is None else 1.0 / math.log2(r + 1)


def lcp_diversity(sids) -> float:
    """Mean over unordered pairs of 1 - lcp/L."""
    sids = [tuple(y) for y in sids]
    if len(sids) < 2:
        raise ValueError("diversity needs at least two candidates")
    L = len(sids[0])
    pairs = list(itertools.combinations(sids, 2))
    return float(np.mean([1.0 - lcp_len(a, b) / L for a, b in pairs]))


def max_reward(cands: CandidateSet, env: Environment) -> float:
    if len(cands) == 0:
        raise ValueError("empty candidate set")
    return max(terminal_reward(env, cands.context, y) for y in cands.sids)


def spearman(xs, ys) -> tuple[float, bool]:
    """Rank correlation with average ranks; returns (rho, degenerate).

    A constant input has no defined correlation, so it yields (0.0, True).
    """
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if xs.shape != ys.shape:
        raise ValueError("length mismatch")
    if xs.size < 2:
        raise ValueError("need at least two points")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        return 0.0, True
    return float(stats.spearmanr(xs, ys)[0]), False


def prefix_reward(cands: CandidateSet, p: Prefix) -> float:
    if cands.rewards is None:
        raise ValueError("candidate rewards must be set")
    members = prefix_bucket(cands, p)
    if not members:
        raise EmptyBucket(f"no candidate under prefix {p}")
    return float(np.mean(cands.rewards[members]))


@dataclass
class MetricRow:
    hr: dict[int, float]
    ndcg: dict[int, float]

    def flat(self) -> dict[str, float]:
        out = {f"hr@{k}": v for k, v in self.hr.items()}
        out.update({f"ndcg@{k}": v for k, v in self.ndcg.items()})
        return out


def ranking_metrics(ranked_lists: list[list[Sid]], truths: list[Sid], ks=(3, 5, 10)) -> MetricRow:
    hr = {k: float(np.mean([hr_at_k(r, t, k) for r, t in zip(ranked_lists, truths)])) for k in ks}
    nd = {k: float(np.mean([ndcg_at_k(r, t, k) for r, t in zip(ranked_lists, truths)])) for k in ks}
    return MetricRow(hr, nd)


def rank_by_logprob(cands: CandidateSet) -> list[Sid]:
    order = sorted(range(len(cands)), key=lambda i: (-cands.logprobs[i], cands.sids[i]))
    return [cands.sids[i] for i in order]


def alignment_study(
    policies: dict[str, PolicyTable],
    values: dict[str, ValueEstimator],
    env: Environment,
    contexts,
    pool_size: int = 64,
    temperature: float = 1.5,
    seed: int = 0,
) -> list[dict]:
    """Per-level Spearman rho of log-prob (and value, where given) against bucket reward.

    For every (variant, context) a pool of up to ``pool_size`` distinct SIDs is
    drawn by temperature sampling from that variant's policy. ``values`` maps
    variant names to the value estimator scored on that variant's pools;
    variants without one report log-prob only. Queries whose signal or reward
    is constant at a level are left out of the mean and counted as skipped.
    """
    if len(policies) < 1:
        raise ValueError("need at least one policy variant")
    unknown = set(values) - set(policies)
    if unknown:
        raise ValueError(f"values given for unknown variants {sorted(unknown)}")
    rows = []
    for name, policy in policies.items():
        v_est = values.get(name)
        signals = ("logprob", "value") if v_est is not None else ("logprob",)
        acc = {(ell, s): [] for ell in range(1, env.L + 1) for s in signals}
        skipped = {k: 0 for k in acc}
        for x in contexts:
            pool = topk_sample(
                policy, int(x), K=env.V, count=pool_size,
                seed=int(substream(seed, "alignment", name, int(x)).integers(2**31)),
                temperature=temperature,
            )
            pool.rewards = env.all_rewards(int(x))[[prefix_index(y, env.V) for y in pool.sids]]
            for ell in range(1, env.L + 1):
                prefixes = sorted({y[:ell] for y in pool.sids})
                rew = [prefix_reward(pool, p) for p in prefixes]
                for sig in signals:
                    if len(rew) < 2:
                        skipped[(ell, sig)] += 1
                        continue
                    if sig == "logprob":
                        xs = [policy.prefix_logprob(int(x), p) for p in prefixes]
                    else:
                        xs = [v_est.estimate(int(x), p) for p in prefixes]
                    rho, flat = spearman(xs, rew)
                    if flat:
                        skipped[(ell, sig)] += 1
                    else:
                        acc[(ell, sig)].append(rho)
        for (ell, sig), vals in acc.items():
            rows.append({
                "variant": name,
                "level": ell,
                "signal": sig,
                "rho": float(np.mean(vals)) if vals else float("nan"),
                "queries": len(vals),
                "skipped": skipped[(ell, sig)],
            })
    return rows
