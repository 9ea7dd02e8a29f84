"""Exact tabular autoregressive policy and likelihood-driven decoders.

Logits live in a dense array of shape ``(rows, internal_nodes, V)``. Contexts
map to rows through ``context_row`` so that contexts sharing a user state
share parameters; without a mapping the context id *is* the row.

Every decoder charges forward-token cost with the same rule: one unit per
distinct prefix of depth < L whose next-token distribution is computed.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    Prefix,
    Sid,
    Vocab,
    level_offset,
    node_id,
    prefix_index,
)

POLICY_FORMAT_VERSION = 1
TOPK_RETRY_FACTOR = 20


class ValidityMask:
    """Which leaves are real catalog items, plus the implied prefix masks."""

    def __init__(self, leaf_valid: np.ndarray, V: int, L: int):
        leaf_valid = np.asarray(leaf_valid, dtype=bool)
        if leaf_valid.shape != (V**L,):
            raise ValueError(f"leaf mask must have shape ({V**L},)")
        if not leaf_valid.any():
            raise ValueError("validity mask has no valid leaf")
        self.V, self.L = V, L
        levels = [leaf_valid]
        for d in range(L - 1, -1, -1):
            levels.append(levels[-1].reshape(V**d, V).any(axis=1))
        # by_depth[d] has shape (V**d,)
        self.by_depth = list(reversed(levels))

    @classmethod
    def all_valid(cls, V: int, L: int) -> "ValidityMask":
        return cls(np.ones(V**L, dtype=bool), V, L)

    def child_mask(self, p: Prefix) -> np.ndarray:
        i = prefix_index(p, self.V)
        return self.by_depth[len(p) + 1][i * self.V:(i + 1) * self.V]

    def is_valid(self, p: Prefix) -> bool:
        return bool(self.by_depth[len(p)][prefix_index(p, self.V)])

    @property
    def all_true(self) -> bool:
        return bool(self.by_depth[-1].all())


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PolicyTable:
    logits: np.ndarray
    V: int
    L: int
    temperature: float = 1.0
    context_row: np.ndarray | None = None
    valid: ValidityMask | None = None

    def __post_init__(self) -> None:
        self.logits = np.asarray(self.logits, dtype=np.float64)
        n_internal = level_offset(self.V, self.L)
        if self.logits.ndim != 3 or self.logits.shape[1:] != (n_internal, self.V):
            raise ValueError(
                f"logits must have shape (rows, {n_internal}, {self.V}), got {self.logits.shape}"
            )
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        self.vocab = Vocab(self.V, self.L)

    @classmethod
    def uniform(cls, V: int, L: int, rows: int = 1, **kw) -> "PolicyTable":
        return cls(np.zeros((rows, level_offset(V, L), V)), V, L, **kw)

    @classmethod
    def random(cls, V: int, L: int, rows: int = 1, scale: float = 1.0, seed: int = 0, **kw):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, (rows, level_offset(V, L), V)), V, L, **kw)

    @property
    def n_rows(self) -> int:
        return self.logits.shape[0]

    def row(self, x: int) -> int:
        if self.context_row is None:
            if not 0 <= x < self.n_rows:
                raise ValueError(f"unknown context {x}")
            return int(x)
        if not 0 <= x < len(self.context_row):
            raise ValueError(f"unknown context {x}")
        return int(self.context_row[x])

    def copy(self) -> "PolicyTable":
        return PolicyTable(
            self.logits.copy(), self.V, self.L, self.temperature, self.context_row, self.valid
        )

    def snapshot_hash(self) -> str:
        return hashlib.sha256(self.logits.tobytes()).hexdigest()[:16]

    def _masked_logits(self, z: np.ndarray, p: Prefix) -> np.ndarray:
        if self.valid is None or self.valid.all_true:
            return z
        return np.where(self.valid.child_mask(p), z, -np.inf)

    def next_dist(self, x: int, p: Prefix, temperature: float | None = None) -> np.ndarray:
        """pi(. | x, p) after validity masking; invalid children get exactly 0."""
        if len(p) >= self.L:
            raise ValueError(f"prefix {p} is terminal; no next-token distribution")
        t = self.temperature if temperature is None else temperature
        z = self.logits[self.row(x), node_id(p, self.V)] / t
        return softmax(self._masked_logits(z, p))

    def step_logprobs(self, x: int, y: Sid) -> np.ndarray:
        y = self.vocab.check_sid(y)
        out = np.empty(self.L)
        for ell in range(self.L):
            out[ell] = np.log(self.next_dist(x, y[:ell])[y[ell]])
        return out

    def sequence_logprob(self, x: int, y: Sid) -> float:
        return float(self.step_logprobs(x, y).sum())

    def prefix_logprob(self, x: int, p: Prefix) -> float:
        return float(sum(np.log(self.next_dist(x, p[:i])[p[i]]) for i in range(len(p))))

    def entropy(self, x: int, p: Prefix, temperature: float | None = None) -> float:
        """Next-token entropy in nats, with 0 log 0 := 0."""
        return entropy_of(self.next_dist(x, p, temperature))

    def logprob_grad(self, x: int, p: Prefix, v: int) -> np.ndarray:
        """d log pi(v | x, p) / d logits at node (x, p)."""
        pi = self.next_dist(x, p)
        g = -pi
        g[v] += 1.0
        return g / self.temperature

    def dist_matrices(self, x: int, temperature: float | None = None) -> list[np.ndarray]:
        """Next-token distributions of every internal prefix, shape (V**d, V) per depth d."""
        t = self.temperature if temperature is None else temperature
        row = self.logits[self.row(x)]
        out = []
        for d in range(self.L):
            lo = level_offset(self.V, d)
            z = row[lo:lo + self.V**d] / t
            if self.valid is not None and not self.valid.all_true:
                z = np.where(self.valid.by_depth[d + 1].reshape(self.V**d, self.V), z, -np.inf)
            out.append(softmax(z))
        return out

    def level_logprobs(self, x: int, temperature: float | None = None) -> list[np.ndarray]:
        """log pi(prefix | x) for every prefix, one array of length V**d per depth d."""
        levels = [np.zeros(1)]
        with np.errstate(divide="ignore"):
            for pi in self.dist_matrices(x, temperature):
                levels.append((levels[-1][:, None] + np.log(pi)).reshape(-1))
        return levels


def entropy_of(pi: np.ndarray) -> float:
    nz = pi[pi > 0]
    return float(max(0.0, -np.sum(nz * np.log(nz))))


@dataclass
class CandidateSet:
    """Decoder output: unique SIDs with log-probs and a behavior-policy snapshot."""

    context: int
    sids: list[Sid]
    logprobs: np.ndarray
    step_logprobs: np.ndarray
    rewards: np.ndarray | None = None
    values: np.ndarray | None = None
    cost: int = 0
    underfilled: bool = False
    decoder: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(set(self.sids)) != len(self.sids):
            raise ValueError("candidate SIDs must be unique")
        self.logprobs = np.asarray(self.logprobs, dtype=np.float64)
        self.step_logprobs = np.asarray(self.step_logprobs, dtype=np.float64).reshape(
            len(self.sids), -1
        )

    def __len__(self) -> int:
        return len(self.sids)

    @classmethod
    def from_sids(cls, policy: PolicyTable, x: int, sids, **kw) -> "CandidateSet":
        sids = [tuple(int(t) for t in y) for y in sids]
        steps = np.array([policy.step_logprobs(x, y) for y in sids]).reshape(len(sids), policy.L)
        return cls(x, sids, steps.sum(axis=1), steps, **kw)

    def to_record(self) -> dict:
        return {
            "context": self.context,
            "decoder": self.decoder,
            "sids": [list(y) for y in self.sids],
            "logprobs": self.logprobs.tolist(),
            "rewards": None if self.rewards is None else self.rewards.tolist(),
            "values": None if self.values is None else self.values.tolist(),
            "cost": self.cost,
            "underfilled": self.underfilled,
        }


class CostMeter:
    """Caches next-token distributions and counts distinct evaluated prefixes."""

    def __init__(self, policy: PolicyTable, x: int, temperature: float | None = None):
        self.policy, self.x, self.temperature = policy, x, temperature
        self.cache: dict[Prefix, np.ndarray] = {}

    @property
    def cost(self) -> int:
        return len(self.cache)

    def dist(self, p: Prefix) -> np.ndarray:
        d = self.cache.get(p)
        if d is None:
            d = self.policy.next_dist(self.x, p, self.temperature)
            self.cache[p] = d
        return d


def beam_levels(meter: "CostMeter", L: int, width: int) -> list[list[tuple[float, Prefix]]]:
    """Kept (score, prefix) pairs at every depth 0..L of width-limited beam search."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    levels: list[list[tuple[float, Prefix]]] = [[(0.0, ())]]
    with np.errstate(divide="ignore"):
        for _ in range(L):
            expanded = []
            for score, p in levels[-1]:
                logp = np.log(meter.dist(p))
                for v in np.flatnonzero(np.isfinite(logp)):
                    expanded.append((score + logp[v], p + (int(v),)))
            expanded.sort(key=lambda e: (-e[0], e[1]))
            levels.append(expanded[:width])
    return levels


def beam_search(policy: PolicyTable, x: int, width: int) -> CandidateSet:
    """Width-``width`` beam search; ties broken by lexicographic SID order."""
    meter = CostMeter(policy, x)
    sids = [p for _, p in beam_levels(meter, policy.L, width)[-1]]
    steps = np.array([[np.log(meter.cache[y[:i]][y[i]]) for i in range(policy.L)] for y in sids])
    return CandidateSet(
        x, sids, steps.sum(axis=1), steps, cost=meter.cost, decoder="beam",
        meta={"nominal_cost": nominal_beam_cost(policy.V, policy.L, width)},
    )


def nominal_beam_cost(V: int, L: int, width: int) -> int:
    """Budget-accounting cost 1 + (L-1) * width, with width capped at V**(L-1).

    Equals ``beam_cost`` whenever width <= V; for small vocabularies the
    distinct-prefix count is lower because shallow depths have fewer prefixes.
    """
    return 1 + (L - 1) * min(width, V ** (L - 1))


def beam_cost(V: int, L: int, width: int) -> int:
    """Forward-token cost of width-``width`` beam search on a fully valid trie."""
    return 1 + sum(min(width, V**d) for d in range(1, L))


def topk_sample(
    policy: PolicyTable,
    x: int,
    K: int,
    count: int,
    seed: int | np.random.Generator,
    temperature: float | None = None,
) -> CandidateSet:
    """Per-step renormalized top-K sampling, deduplicated.

    Draws until ``count`` unique SIDs are found or ``20 * count`` attempts are
    spent; in the latter case the set comes back short with ``underfilled``.
    Entries are ordered by log-probability (descending), ties lexicographic.
    """
    if not 1 <= K <= policy.V:
        raise ValueError(f"K must be in [1, {policy.V}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    meter = CostMeter(policy, x, temperature)
    found: dict[Sid, None] = {}
    attempts = 0
    while len(found) < count and attempts < TOPK_RETRY_FACTOR * count:
        attempts += 1
        p: Prefix = ()
        for _ in range(policy.L):
            pi = meter.dist(p)
            order = np.lexsort((np.arange(policy.V), -pi))[:K]
            w = pi[order]
            if w.sum() <= 0:
                break
            v = int(order[rng.choice(len(order), p=w / w.sum())])
            p = p + (v,)
        if len(p) == policy.L:
            found[p] = None
    cs = CandidateSet.from_sids(policy, x, list(found), cost=meter.cost, decoder="topk")
    order = sorted(range(len(cs)), key=lambda i: (-cs.logprobs[i], cs.sids[i]))
    cs = CandidateSet(
        x,
        [cs.sids[i] for i in order],
        cs.logprobs[order],
        cs.step_logprobs[order],
        cost=meter.cost,
        underfilled=len(found) < count,
        decoder="topk",
    )
    return cs


def save_policy(policy: PolicyTable, path: str | Path) -> None:
    """Exact snapshot: logits, temperature, context map and validity mask."""
    arrays = {
        "format_version": np.array(POLICY_FORMAT_VERSION),
        "shape": np.array([policy.V, policy.L]),
        "temperature": np.array(policy.temperature),
        "logits": policy.logits,
    }
    if policy.context_row is not None:
        arrays["context_row"] = np.asarray(policy.context_row)
    if policy.valid is not None:
        arrays["leaf_valid"] = policy.valid.by_depth[-1]
    Path(path).write_bytes(npz_bytes(arrays))


def load_policy(path: str | Path) -> PolicyTable:
    with np.load(path) as f:
        version = int(f["format_version"])
        if version != POLICY_FORMAT_VERSION:
            raise ValueError(f"unsupported policy format version {version}")
        V, L = (int(v) for v in f["shape"])
        valid = ValidityMask(f["leaf_valid"], V, L) if "leaf_valid" in f else None
        return PolicyTable(
            f["logits"].copy(),
            V,
            L,
            float(f["temperature"]),
            f["context_row"].copy() if "context_row" in f else None,
            valid,
        )


def npz_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    """Uncompressed npz with fixed zip timestamps, so equal inputs give equal bytes."""
    import zipfile

    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            member = io.BytesIO()
            np.save(member, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, member.getvalue())
    return buf.getvalue()
