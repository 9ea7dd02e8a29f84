"""Decode -> score -> TD fit -> policy update loop, with beam and top-K baselines."""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import ConfigError, substream
from .env import Environment, terminal_reward
from .evaluation import lcp_diversity, ranking_metrics
from .policy import CandidateSet, PolicyTable, beam_search, topk_sample
from .rl import RlConfig, compute_advantages, joint_update, objective_weights
from .value import (
    LinearValue, StepRewardParams, ValueTable, harvest_transitions, prefix_feature_table, td_fit,
)
from .ved import VedConfig, ved_decode

DECODERS = ("beam", "topk", "ved")
VALUE_KINDS = ("table", "linear")


@dataclass
class LoopConfig:
    iterations: int = 30
    batch_contexts: int = 64
    decoder: str = "ved"
    objective: str = "joint"
    beam_width: int = 16
    topk_k: int = 4
    topk_count: int = 16
    ved: VedConfig = field(default_factory=VedConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    step: StepRewardParams = field(default_factory=StepRewardParams)
    value_kind: str = "table"
    value_lr: float = 0.5
    gamma: float = 0.99
    td_steps: int = 50
    td_every: int = 1
    td_replay: int = 1  # number of most recent harvested batches each TD fit sees
    eval_ks: tuple[int, ...] = (3, 5, 10)
    eval_contexts: int | None = None  # None -> every held-out context
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_contexts < 1:
            raise ConfigError("batch_contexts must be >= 1")
        if self.decoder not in DECODERS:
            raise ConfigError(f"unknown decoder {self.decoder!r}; expected one of {DECODERS}")
        objective_weights(self.objective, self.rl.kappa)
        if self.value_kind not in VALUE_KINDS:
            raise ConfigError(f"unknown value kind {self.value_kind!r}")
        if self.beam_width < 1 or self.topk_count < 1 or self.topk_k < 1:
            raise ConfigError("beam_width, topk_k and topk_count must be >= 1")
        if self.td_steps < 0 or self.td_every < 1 or self.eval_every < 1 or self.td_replay < 1:
            raise ConfigError("td_steps >= 0 and td_every, td_replay, eval_every >= 1 required")
        if not self.eval_ks or min(self.eval_ks) < 1:
            raise ConfigError("eval_ks must be positive")
        self.eval_ks = tuple(int(k) for k in self.eval_ks)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    config: dict
    iterations: list[dict] = field(default_factory=list)
    policy: PolicyTable | None = None
    value: object | None = None

    def append(self, row: dict) -> None:
        self.iterations.append(row)

    @property
    def final(self) -> dict:
        evals = [r for r in self.iterations if "eval" in r]
        return evals[-1]["eval"] if evals else {}

    def metric_trace(self, key: str) -> list[float]:
        return [r["eval"][key] for r in self.iterations if "eval" in r]


def make_value(env: Environment, kind: str = "table", lr: float = 0.5, gamma: float = 0.99):
    """Value estimator sharing the policy's context -> user-state tying."""
    rows = int(env.state_of.max()) + 1
    if kind == "table":
        return ValueTable(env.V, env.L, rows=rows, gamma=gamma, lr=lr, context_row=env.state_of)
    if kind == "linear":
        return LinearValue(
            prefix_feature_table(env), env.V, env.L, rows=rows, gamma=gamma, lr=lr,
            context_row=env.state_of,
        )
    raise ConfigError(f"unknown value kind {kind!r}")


def eval_checkpoint(env: Environment, policy: PolicyTable, contexts, ks=(3, 5, 10)) -> dict:
    """HR@K and NDCG@K of width-max(K) beam search; beams are shared per parameter row."""
    width = max(ks)
    cache: dict[int, list] = {}
    lists, truths = [], []
    for x in contexts:
        x = int(x)
        r = policy.row(x)
        if r not in cache:
            cache[r] = beam_search(policy, x, width).sids
        lists.append(cache[r])
        truths.append(env.truth_sid(x))
    return ranking_metrics(lists, truths, ks).flat()


def decode(policy, value, x: int, cfg: LoopConfig, rng: np.random.Generator) -> CandidateSet:
    if cfg.decoder == "beam":
        return beam_search(policy, x, cfg.beam_width)
    if cfg.decoder == "topk":
        return topk_sample(policy, x, cfg.topk_k, cfg.topk_count, rng)
    cands, stats = ved_decode(policy, value, x, cfg.ved, rng)
    cands.meta["stats"] = stats
    return cands


def score(env: Environment, cands: CandidateSet) -> CandidateSet:
    cands.rewards = np.array([terminal_reward(env, cands.context, y) for y in cands.sids])
    return cands


def run_loop(
    env: Environment,
    policy: PolicyTable,
    value=None,
    cfg: LoopConfig | None = None,
    reference: PolicyTable | None = None,
    log=None,
) -> RunRecord:
    """Train ``policy`` (in place) and ``value`` for ``cfg.iterations`` rounds.

    Every iteration decodes a batch of training contexts against a frozen
    snapshot, scores the candidates, fits the value on the transitions of
    the last ``td_replay`` batches (this batch only by default), takes one
    policy step and evaluates on held-out contexts.
    ``log`` is called with each iteration row when given.
    """
    cfg = cfg or LoopConfig()
    if cfg.decoder == "ved" and cfg.ved.init_width > cfg.ved.output_size:
        raise ConfigError("ved init_width exceeds output_size")
    value = value if value is not None else make_value(env, cfg.value_kind, cfg.value_lr, cfg.gamma)
    reference = reference if reference is not None else policy.copy()
    train = env.train_contexts
    if len(train) < cfg.batch_contexts:
        raise ConfigError("batch_contexts exceeds the number of training contexts")
    test = env.test_contexts
    if cfg.eval_contexts is not None:
        test = test[: cfg.eval_contexts]

    record = RunRecord(cfg.to_dict())
    row0 = {"iteration": 0, "eval": eval_checkpoint(env, policy, test, cfg.eval_ks)}
    record.append(row0)
    if log:
        log(row0)
    replay: deque[list] = deque(maxlen=cfg.td_replay)
    for it in range(1, cfg.iterations + 1):
        snapshot = policy.copy()
        snap_hash = snapshot.snapshot_hash()
        xs = substream(cfg.seed, "batch", it).choice(train, cfg.batch_contexts, replace=False)
        batch = []
        for x in xs:
            rng = substream(cfg.seed, "decode", it, int(x))
            batch.append(score(env, decode(snapshot, value, int(x), cfg, rng)))
        row = {"iteration": it, "snapshot": snap_hash}
        if cfg.td_steps and it % cfg.td_every == 0:
            replay.append([t for c in batch for t in harvest_transitions(env, c, cfg.step)])
            trace = td_fit(value, [t for b in replay for t in b], cfg.td_steps)
            row["td_loss"] = trace[-1]
        advs = compute_advantages(batch, cfg.rl.eps)
        upd = joint_update(policy, snapshot, reference, batch, cfg.rl, cfg.objective, advs)
        if policy.snapshot_hash() == snap_hash and cfg.rl.lr > 0 and upd["grad_norm"] > 0:
            raise RuntimeError("policy update did not change parameters")
        row.update(upd)
        row["mean_reward"] = float(np.mean([c.rewards.mean() for c in batch]))
        row["max_reward"] = float(np.mean([c.rewards.max() for c in batch]))
        row["recall"] = float(np.mean([env.truth_sid(c.context) in c.sids for c in batch]))
        row["diversity"] = float(np.mean([lcp_diversity(c.sids) for c in batch if len(c) > 1]))
        row["mean_cost"] = float(np.mean([c.cost for c in batch]))
        row["sigma_a"] = float(np.mean([d["sigma_a"] for d in advs.diagnostics]))
        row["delta_r"] = float(np.mean([d["delta_r"] for d in advs.diagnostics]))
        row["bound_violations"] = int(sum(
            not (d["abs_bound_ok"] and d["var_bound_ok"] and d["sigma_bound_ok"])
            for d in advs.diagnostics
        ))
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            row["eval"] = eval_checkpoint(env, policy, test, cfg.eval_ks)
        record.append(row)
        if log:
            log(row)
    record.policy, record.value = policy, value
    return record
