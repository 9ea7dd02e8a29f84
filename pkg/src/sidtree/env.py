"""Synthetic recommendation environment with planted likelihood/reward misalignment.

Each context is a user query belonging to one of ``n_states`` user states. The
initial policy is a maximum-likelihood fit (with additive smoothing) to
interaction logs drawn from a per-state popularity distribution, so contexts of
the same state share policy parameters. A ``fraction`` of contexts get their
ground-truth item from a small set of per-state "hidden" items that sit under a
first token ranked in the bottom ``q`` quantile of the fitted policy; the rest
follow the popularity distribution outside that quantile.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigError, Prefix, Sid, level_offset, prefix_from_index, prefix_index, substream
from .policy import PolicyTable, ValidityMask, npz_bytes

ENV_FORMAT_VERSION = 1


@dataclass
class MisalignmentSpec:
    fraction: float = 0.5
    q: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError(f"fraction must be in [0, 1], got {self.fraction}")
        if not 0.0 < self.q < 1.0:
            raise ConfigError(f"q must be in (0, 1), got {self.q}")


@dataclass
class EnvSizes:
    V: int = 16
    L: int = 3
    d: int = 16
    n_states: int = 8
    n_contexts: int = 2000
    train_fraction: float = 0.5
    alpha: float = 0.5
    # SFT logs and fit
    n_logs: int = 400
    smoothing: float = 0.5
    zipf_exponent: float = 1.1
    hidden_per_state: int = 2
    valid_fraction: float = 1.0
    # embedding scales: shared component, then one per level (decreasing)
    shared_scale: float = 0.6
    level_scales: tuple[float, ...] = (1.0, 0.3, 0.12)

    def __post_init__(self) -> None:
        self.level_scales = tuple(float(s) for s in self.level_scales)
        if not 2 <= self.V <= 32:
            raise ConfigError("desk scale requires 2 <= V <= 32")
        if self.L < 1 or self.V**self.L > 10**6:
            raise ConfigError("V^L too large for desk scale")
        if not 1 <= self.n_contexts <= 10**4:
            raise ConfigError("n_contexts must be in [1, 10^4]")
        if len(self.level_scales) != self.L:
            raise ConfigError(f"level_scales needs {self.L} entries")
        if not 0.0 < self.valid_fraction <= 1.0:
            raise ConfigError("valid_fraction must be in (0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")


@dataclass
class Environment:
    V: int
    L: int
    d: int
    seed: int
    alpha: float
    state_of: np.ndarray  # (n_contexts,) user state per context
    truth: np.ndarray  # (n_contexts, L) ground-truth SID per context
    is_train: np.ndarray  # (n_contexts,) bool
    planted: np.ndarray  # (n_contexts,) bool
    embeddings: np.ndarray  # (V**L, d), unit rows
    leaf_valid: np.ndarray  # (V**L,) bool
    hidden_items: np.ndarray  # (n_states, hidden_per_state) leaf indices
    exact_payoff: float = 1.0
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.valid = ValidityMask(self.leaf_valid, self.V, self.L)

    @property
    def n_contexts(self) -> int:
        return len(self.state_of)

    @property
    def train_contexts(self) -> np.ndarray:
        return np.flatnonzero(self.is_train)

    @property
    def test_contexts(self) -> np.ndarray:
        return np.flatnonzero(~self.is_train)

    def check_context(self, x: int) -> int:
        if not 0 <= x < self.n_contexts:
            raise ValueError(f"unknown context {x}")
        return int(x)

    def truth_sid(self, x: int) -> Sid:
        return tuple(int(t) for t in self.truth[self.check_context(x)])

    def item_index(self, y: Prefix) -> int:
        return prefix_index(y, self.V)

    def embedding(self, y: Sid) -> np.ndarray:
        return self.embeddings[self.item_index(y)]

    def all_rewards(self, x: int) -> np.ndarray:
        """Terminal reward of every leaf for context ``x`` (length V**L)."""
        star = self.item_index(self.truth_sid(x))
        r = self.alpha * np.maximum(0.0, self.embeddings @ self.embeddings[star])
        r[star] = self.exact_payoff
        return r


def terminal_reward(env: Environment, x: int, y: Sid) -> float:
    """1 on exact match, else alpha * max(0, cos(e(y), e(y*)))."""
    env.check_context(x)
    y = tuple(int(t) for t in y)
    if len(y) != env.L or any(not 0 <= t < env.V for t in y):
        raise ValueError(f"invalid SID {y}")
    if y == env.truth_sid(x):
        return env.exact_payoff
    cos = float(env.embedding(y) @ env.embedding(env.truth_sid(x)))
    return env.alpha * max(0.0, cos)


def _zipf_weights(n: int, a: float, rng: np.random.Generator) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** a
    return w[rng.permutation(n)]


def _hierarchical_embeddings(sz: EnvSizes, rng: np.random.Generator) -> np.ndarray:
    V, L, d = sz.V, sz.L, sz.d
    shared = rng.normal(0.0, 1.0, d)
    shared /= np.linalg.norm(shared)
    emb = np.tile(sz.shared_scale * shared, (V**L, 1))
    for depth in range(1, L + 1):
        z = rng.normal(0.0, 1.0 / np.sqrt(d), (V**depth, d)) * sz.level_scales[depth - 1]
        emb += np.repeat(z, V ** (L - depth), axis=0)
    return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def _leaf_distribution(node_weights: np.ndarray, mask: ValidityMask, V: int, L: int) -> np.ndarray:
    """Leaf probabilities from per-node child weights, masked and renormalized."""
    probs = np.ones(1)
    for d in range(L):
        lo = level_offset(V, d)
        w = node_weights[lo:lo + V**d] * mask.by_depth[d + 1].reshape(V**d, V)
        s = w.sum(axis=1, keepdims=True)
        w = np.divide(w, s, out=np.zeros_like(w), where=s > 0)
        probs = (probs[:, None] * w).reshape(-1)
    return probs


def _fit_logits(items: np.ndarray, V: int, L: int, smoothing: float) -> np.ndarray:
    """Smoothed maximum-likelihood logits of the autoregressive factorization."""
    counts = np.zeros((level_offset(V, L), V))
    for d in range(L):
        parent = items // V ** (L - d)
        child = (items // V ** (L - d - 1)) % V
        np.add.at(counts, (level_offset(V, d) + parent, child), 1.0)
    return np.log(counts + smoothing)


def first_token_rank(policy: PolicyTable, x: int, token: int) -> int:
    """0-based ascending rank of a first token's probability among valid first tokens."""
    pi = policy.next_dist(x, ())
    valid = np.flatnonzero(pi > 0)
    order = valid[np.lexsort((valid, pi[valid]))]
    return int(np.flatnonzero(order == token)[0])


def bottom_quantile_size(n_valid: int, q: float) -> int:
    return int(np.floor(q * n_valid))


def generate(spec: MisalignmentSpec, sizes: EnvSizes | None = None) -> tuple[Environment, PolicyTable]:
    """Build an environment and its SFT-like initial policy."""
    sz = sizes or EnvSizes()
    V, L, S = sz.V, sz.L, sz.n_states
    seed = spec.seed

    leaf_valid = np.ones(V**L, dtype=bool)
    if sz.valid_fraction < 1.0:
        rng = substream(seed, "env", "validity")
        leaf_valid = rng.random(V**L) < sz.valid_fraction
        if not leaf_valid.any():
            raise ConfigError("validity mask removed every item")
    mask = ValidityMask(leaf_valid, V, L)
    embeddings = _hierarchical_embeddings(sz, substream(seed, "env", "embeddings"))

    # per-state popularity, logs and maximum-likelihood fit
    n_internal = level_offset(V, L)
    logits = np.empty((S, n_internal, V))
    popularity = np.empty((S, V**L))
    for s in range(S):
        rng = substream(seed, "env", "popularity", s)
        weights = np.stack([_zipf_weights(V, sz.zipf_exponent, rng) for _ in range(n_internal)])
        popularity[s] = _leaf_distribution(weights, mask, V, L)
        logs = rng.choice(V**L, size=sz.n_logs, p=popularity[s])
        logits[s] = _fit_logits(logs, V, L, sz.smoothing)

    rng = substream(seed, "env", "contexts")
    n = sz.n_contexts
    state_of = rng.permutation(np.arange(n) % S)
    policy = PolicyTable(logits, V, L, context_row=state_of, valid=mask)

    # hidden items under a bottom-q first token of each state
    state_policy = PolicyTable(logits, V, L, valid=mask)
    bottom_sets, hidden = [], np.zeros((S, sz.hidden_per_state), dtype=np.int64)
    for s in range(S):
        pi = state_policy.next_dist(s, ())
        valid_first = np.flatnonzero(pi > 0)
        k = bottom_quantile_size(len(valid_first), spec.q)
        order = valid_first[np.lexsort((valid_first, pi[valid_first]))]
        bottom = order[:k]
        bottom_sets.append(bottom)
        if spec.fraction > 0:
            if k == 0:
                raise ConfigError(
                    f"q={spec.q} leaves no bottom-quantile first token among {len(valid_first)}"
                )
            hrng = substream(seed, "env", "hidden", s)
            first = int(hrng.choice(bottom))
            span = V ** (L - 1)
            under = first * span + np.flatnonzero(leaf_valid[first * span:(first + 1) * span])
            if len(under) < sz.hidden_per_state:
                raise ConfigError("not enough valid items under the hidden branch")
            hidden[s] = hrng.choice(under, size=sz.hidden_per_state, replace=False)

    n_planted = int(round(spec.fraction * n))
    planted = np.zeros(n, dtype=bool)
    planted[rng.permutation(n)[:n_planted]] = True
    truth_idx = np.empty(n, dtype=np.int64)
    for x in range(n):
        s = state_of[x]
        if planted[x]:
            truth_idx[x] = rng.choice(hidden[s])
        else:
            p = popularity[s].copy()
            first = np.arange(V**L) // V ** (L - 1)
            p[np.isin(first, bottom_sets[s])] = 0.0
            if p.sum() <= 0:
                raise ConfigError("no popular mass outside the bottom quantile")
            truth_idx[x] = rng.choice(V**L, p=p / p.sum())
    truth = np.array([prefix_from_index(int(i), L, V) for i in truth_idx], dtype=np.int64)
    is_train = np.zeros(n, dtype=bool)
    is_train[rng.permutation(n)[: int(round(sz.train_fraction * n))]] = True

    config = {"misalignment": asdict(spec), "sizes": asdict(sz)}
    config["sizes"]["level_scales"] = list(sz.level_scales)
    env = Environment(
        V, L, sz.d, seed, sz.alpha, state_of, truth, is_train, planted,
        embeddings, leaf_valid, hidden, config=config,
    )
    return env, policy


def misalignment_audit(env: Environment, policy: PolicyTable, q: float | None = None) -> dict:
    """Measured share of contexts whose truth's first token is in the bottom-q quantile."""
    q = env.config.get("misalignment", {}).get("q", 0.25) if q is None else q
    hits = 0
    for x in range(env.n_contexts):
        pi = policy.next_dist(x, ())
        k = bottom_quantile_size(int((pi > 0).sum()), q)
        if first_token_rank(policy, x, int(env.truth[x, 0])) < k:
            hits += 1
    return {
        "contexts": env.n_contexts,
        "planted": int(env.planted.sum()),
        "measured_fraction": hits / env.n_contexts,
        "target_fraction": env.config.get("misalignment", {}).get("fraction"),
    }


def embedding_similarity_profile(env: Environment) -> np.ndarray:
    """Mean cosine over valid item pairs grouped by exact LCP length 0..L.

    Uses sum_{i,j in group} cos(i, j) = ||sum_i e_i||^2 for unit vectors, so it
    is exact without forming the Gram matrix.
    """
    V, L = env.V, env.L
    e = env.embeddings * env.leaf_valid[:, None]
    ones = env.leaf_valid.astype(float)
    sums, counts = [], []
    for depth in range(L + 1):
        g = e.reshape(V**depth, -1, e.shape[1]).sum(axis=1)
        c = ones.reshape(V**depth, -1).sum(axis=1)
        sums.append(float((g * g).sum()))
        counts.append(float((c * c).sum()))
    sums.append(0.0)
    counts.append(0.0)
    out = np.full(L + 1, np.nan)
    for depth in range(L + 1):
        n = counts[depth] - counts[depth + 1]
        if n > 0:
            out[depth] = (sums[depth] - sums[depth + 1]) / n
    return out


def save_env(env: Environment, policy: PolicyTable, path: str | Path) -> None:
    """Self-describing environment file: JSON header plus arrays, byte-deterministic."""
    header = {
        "format_version": ENV_FORMAT_VERSION,
        "V": env.V,
        "L": env.L,
        "d": env.d,
        "seed": env.seed,
        "alpha": env.alpha,
        "exact_payoff": env.exact_payoff,
        "config": env.config,
    }
    arrays = {
        "header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
        "state_of": env.state_of,
        "truth": env.truth,
        "is_train": env.is_train,
        "planted": env.planted,
        "embeddings": env.embeddings,
        "leaf_valid": env.leaf_valid,
        "hidden_items": env.hidden_items,
        "sft_logits": policy.logits,
    }
    Path(path).write_bytes(npz_bytes(arrays))


def load_env(path: str | Path) -> tuple[Environment, PolicyTable]:
    with np.load(path) as f:
        header = json.loads(f["header"].tobytes().decode())
        if header.get("format_version") != ENV_FORMAT_VERSION:
            raise ValueError(f"unsupported environment format {header.get('format_version')}")
        env = Environment(
            header["V"], header["L"], header["d"], header["seed"], header["alpha"],
            f["state_of"].copy(), f["truth"].copy(), f["is_train"].copy(), f["planted"].copy(),
            f["embeddings"].copy(), f["leaf_valid"].copy(), f["hidden_items"].copy(),
            exact_payoff=header["exact_payoff"], config=header["config"],
        )
        policy = PolicyTable(
            f["sft_logits"].copy(), env.V, env.L, context_row=env.state_of, valid=env.valid
        )
    return env, policy
