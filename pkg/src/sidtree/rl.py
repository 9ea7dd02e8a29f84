"""Group-relative advantages, sibling-node advantages and tabular policy updates.

Gradients are dense arrays shaped like ``PolicyTable.logits`` and are
assembled analytically from d log pi / d logits = onehot - pi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, Prefix, node_id
from .policy import CandidateSet, PolicyTable

OBJECTIVES = ("grpo", "sibling", "joint")
BOUND_RTOL = 1e-12


class DegenerateRatio(ValueError):
    """Behavior policy assigns zero probability to a sampled token."""


@dataclass
class RlConfig:
    eps: float = 1e-6
    kappa: float = 1.0
    kl_coeff: float = 1e-3
    lr: float = 0.05
    clip: float | None = None
    sib_normalization: str = "literal"  # literal | per_depth

    def __post_init__(self) -> None:
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.clip is not None and self.clip <= 0:
            raise ConfigError("clip must be positive when set")
        if self.sib_normalization not in ("literal", "per_depth"):
            raise ConfigError("sib_normalization must be 'literal' or 'per_depth'")


def _normalize(values: np.ndarray, eps: float) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return np.zeros(len(values))
    sigma = values.std()
    if sigma == 0.0:
        return np.zeros(len(values))
    return (values - values.mean()) / (sigma + eps)


def global_advantages(rewards, eps: float = 1e-6) -> np.ndarray:
    """(R - mean) / (std + eps) with population std; constant groups get 0."""
    return _normalize(rewards, eps)


def reward_range(rewards) -> float:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("empty reward group")
    return float(rewards.max() - rewards.min())


def compression_diagnostics(rewards, eps: float = 1e-6) -> dict:
    """Measured spread of the normalized advantages against the range bounds."""
    rewards = np.asarray(rewards, dtype=np.float64)
    delta = reward_range(rewards)
    sigma = float(rewards.std())
    adv = global_advantages(rewards, eps)
    sigma_a = float(adv.std())
    tight = delta / (sigma + eps)
    loose = delta / eps
    slack = BOUND_RTOL * max(1.0, loose)
    return {
        "delta_r": delta,
        "sigma_r": sigma,
        "sigma_a": sigma_a,
        "max_abs_a": float(np.abs(adv).max()),
        "abs_bound_ok": bool(np.all(np.abs(adv) <= tight + slack) and tight <= loose + slack),
        "var_bound_ok": bool(sigma_a**2 <= loose**2 + slack),
        "sigma_bound_ok": bool(sigma_a <= loose + slack),
    }


@dataclass
class SiblingGroup:
    depth: int
    parent: Prefix
    members: dict[int, list[int]]  # child token -> candidate indices
    mean_reward: dict[int, float]
    advantages: dict[int, float] = field(default_factory=dict)

    @property
    def children(self) -> list[int]:
        return sorted(self.members)

    @property
    def size(self) -> int:
        return sum(len(m) for m in self.members.values())


def build_sibling_groups(cands: CandidateSet) -> list[SiblingGroup]:
    """One group per (depth, parent prefix) present among the candidates."""
    if cands.rewards is None:
        raise ValueError("candidate rewards must be set")
    groups: dict[tuple[int, Prefix], dict[int, list[int]]] = {}
    L = len(cands.sids[0]) if cands.sids else 0
    for i, y in enumerate(cands.sids):
        for ell in range(1, L + 1):
            groups.setdefault((ell, y[: ell - 1]), {}).setdefault(y[ell - 1], []).append(i)
    out = []
    for (ell, h), members in sorted(groups.items()):
        means = {v: float(np.mean(cands.rewards[idx])) for v, idx in members.items()}
        out.append(SiblingGroup(ell, h, members, means))
    return out


def sibling_advantages(groups: list[SiblingGroup], eps: float = 1e-6) -> dict[tuple[Prefix, int], float]:
    """Node advantages normalized across siblings; single-child or flat groups get 0."""
    out = {}
    for g in groups:
        kids = g.children
        adv = _normalize(np.array([g.mean_reward[v] for v in kids]), eps)
        g.advantages = {v: float(a) for v, a in zip(kids, adv)}
        for v, a in g.advantages.items():
            out[(g.parent, v)] = float(a)
    return out


def importance_ratio(policy: PolicyTable, snapshot: PolicyTable, x: int, h: Prefix, v: int) -> float:
    old = snapshot.next_dist(x, h)[v]
    if old <= 0:
        raise DegenerateRatio(f"behavior probability of token {v} after {h} is zero")
    return float(policy.next_dist(x, h)[v] / old)


def _ratio_and_grad(policy, snapshot, x, h, v):
    """rho and d rho / d logits at node (x, h)."""
    pi = policy.next_dist(x, h)
    old = snapshot.next_dist(x, h)[v]
    if old <= 0:
        raise DegenerateRatio(f"behavior probability of token {v} after {h} is zero")
    rho = pi[v] / old
    g = -pi.copy()
    g[v] += 1.0
    return rho, rho * g / policy.temperature


def sib_objective(
    policy: PolicyTable,
    snapshot: PolicyTable,
    batch: list[CandidateSet],
    node_advs: list[dict[tuple[Prefix, int], float]],
    normalization: str = "literal",
) -> tuple[float, np.ndarray]:
    """Sibling-node objective averaged over the batch, with its gradient."""
    grad = np.zeros_like(policy.logits)
    total = 0.0
    for cands, advs in zip(batch, node_advs):
        if len(cands) == 0:
            continue
        scale = 1.0 / len(cands)
        if normalization == "per_depth":
            scale /= policy.L
        x, row = cands.context, policy.row(cands.context)
        for (h, v), a in advs.items():
            if a == 0.0:
                continue
            rho, g = _ratio_and_grad(policy, snapshot, x, h, v)
            total += scale * a * rho
            grad[row, node_id(h, policy.V)] += scale * a * g
    n = max(len(batch), 1)
    return total / n, grad / n


def grpo_objective(
    policy: PolicyTable,
    snapshot: PolicyTable,
    batch: list[CandidateSet],
    advantages: list[np.ndarray],
    clip: float | None = None,
) -> tuple[float, np.ndarray]:
    """Sequence advantages on length-averaged token ratios, averaged over the batch.

    With ``clip`` set, each token term becomes min(rho A, clip(rho) A) and its
    gradient vanishes where the clipped branch is active.
    """
    grad = np.zeros_like(policy.logits)
    total = 0.0
    L = policy.L
    for cands, adv in zip(batch, advantages):
        if len(cands) == 0:
            continue
        x, row = cands.context, policy.row(cands.context)
        scale = 1.0 / (len(cands) * L)
        for y, a in zip(cands.sids, adv):
            if a == 0.0:
                continue
            for ell in range(L):
                h = y[:ell]
                rho, g = _ratio_and_grad(policy, snapshot, x, h, y[ell])
                if clip is not None:
                    clipped = min(max(rho, 1.0 - clip), 1.0 + clip)
                    if clipped * a < rho * a:
                        total += scale * clipped * a
                        continue
                total += scale * rho * a
                grad[row, node_id(h, policy.V)] += scale * a * g
    n = max(len(batch), 1)
    return total / n, grad / n


def kl_to_reference(
    policy: PolicyTable, reference: PolicyTable, batch: list[CandidateSet]
) -> tuple[float, np.ndarray]:
    """Token-level KL(pi || pi_ref) averaged over every candidate prefix in the batch."""
    grad = np.zeros_like(policy.logits)
    total, count = 0.0, 0
    for cands in batch:
        x, row = cands.context, policy.row(cands.context)
        for y in cands.sids:
            for ell in range(policy.L):
                h = y[:ell]
                pi = policy.next_dist(x, h)
                ref = reference.next_dist(x, h)
                nz = pi > 0
                logr = np.zeros_like(pi)
                logr[nz] = np.log(pi[nz]) - np.log(ref[nz])
                kl = float(np.sum(pi[nz] * logr[nz]))
                total += kl
                grad[row, node_id(h, policy.V)] += pi * (logr - kl) / policy.temperature
                count += 1
    if count == 0:
        return 0.0, grad
    return total / count, grad / count


def objective_weights(objective: str, kappa: float) -> tuple[float, float]:
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    return {"grpo": (1.0, 0.0), "sibling": (0.0, 1.0), "joint": (1.0, kappa)}[objective]


@dataclass
class BatchAdvantages:
    global_advs: list[np.ndarray]
    node_advs: list[dict[tuple[Prefix, int], float]]
    diagnostics: list[dict]


def compute_advantages(batch: list[CandidateSet], eps: float) -> BatchAdvantages:
    g, n, d = [], [], []
    for cands in batch:
        g.append(global_advantages(cands.rewards, eps))
        n.append(sibling_advantages(build_sibling_groups(cands), eps))
        d.append(compression_diagnostics(cands.rewards, eps))
    return BatchAdvantages(g, n, d)


def joint_update(
    policy: PolicyTable,
    snapshot: PolicyTable,
    reference: PolicyTable,
    batch: list[CandidateSet],
    cfg: RlConfig,
    objective: str = "joint",
    advantages: BatchAdvantages | None = None,
) -> dict:
    """One ascent step on w_g J_grpo + w_s J_sib - kl_coeff KL(pi || pi_ref), in place."""
    w_grpo, w_sib = objective_weights(objective, cfg.kappa)
    advs = advantages or compute_advantages(batch, cfg.eps)
    grad = np.zeros_like(policy.logits)
    j_grpo = j_sib = 0.0
    if w_grpo:
        j_grpo, g = grpo_objective(policy, snapshot, batch, advs.global_advs, cfg.clip)
        grad += w_grpo * g
    if w_sib:
        j_sib, g = sib_objective(policy, snapshot, batch, advs.node_advs, cfg.sib_normalization)
        grad += w_sib * g
    kl = 0.0
    if cfg.kl_coeff:
        kl, g = kl_to_reference(policy, reference, batch)
        grad -= cfg.kl_coeff * g
    policy.logits += cfg.lr * grad
    return {
        "j_grpo": float(j_grpo),
        "j_sib": float(j_sib),
        "kl": float(kl),
        "objective": float(w_grpo * j_grpo + w_sib * j_sib - cfg.kl_coeff * kl),
        "grad_norm": float(np.linalg.norm(grad)),
    }
