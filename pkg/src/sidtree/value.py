"""Prefix value estimators, semantic dense step rewards and TD(0) fitting.

All estimators expose ``estimate(x, prefix) -> float``; VED only relies on that.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np

from .core import EmptyBucket, Prefix, level_offset, node_id, prefix_index
from .env import Environment
from .policy import CandidateSet, PolicyTable, npz_bytes

VALUE_FORMAT_VERSION = 1


class ValueEstimator(Protocol):
    def estimate(self, x: int, p: Prefix) -> float: ...


@dataclass
class StepRewardParams:
    w: tuple[float, ...] = (0.3, 0.5, 1.0)

    def __post_init__(self) -> None:
        self.w = tuple(float(v) for v in self.w)
        if any(v <= 0 for v in self.w):
            raise ValueError("step weights must be positive")
        if any(a > b for a, b in zip(self.w, self.w[1:])):
            raise ValueError("step weights must be non-decreasing with depth")


class Transition(NamedTuple):
    x: int
    prefix: Prefix
    reward: float
    next_prefix: Prefix | None  # None at depth L


def prefix_bucket(cands: CandidateSet, p: Prefix) -> list[int]:
    """Indices of candidates whose SID starts with ``p``."""
    n = len(p)
    return [i for i, y in enumerate(cands.sids) if y[:n] == tuple(p)]


def prefix_embedding(env: Environment, cands: CandidateSet, p: Prefix) -> np.ndarray:
    """Mean embedding of the bucket under ``p`` (not re-normalized)."""
    members = prefix_bucket(cands, p)
    if not members:
        raise EmptyBucket(f"no candidate under prefix {p}")
    idx = [env.item_index(cands.sids[i]) for i in members]
    return env.embeddings[idx].mean(axis=0)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def step_reward(
    env: Environment,
    cands: CandidateSet,
    params: StepRewardParams,
    x: int,
    p: Prefix,
    y_star=None,
    fallback: bool = False,
    diagnostics: Counter | None = None,
) -> float:
    """Dense reward of prefix ``p``: ``w`` on a ground-truth match, else a cosine penalty.

    An empty bucket on the mismatch branch raises ``EmptyBucket`` unless
    ``fallback`` is set, in which case cos := 0 and ``diagnostics["empty_bucket"]``
    is incremented.
    """
    ell = len(p)
    if not 1 <= ell <= env.L:
        raise ValueError(f"prefix depth must be in [1, {env.L}]")
    y_star = env.truth_sid(x) if y_star is None else tuple(y_star)
    w = params.w[ell - 1]
    if tuple(p) == y_star[:ell]:
        return w
    try:
        e_bar = prefix_embedding(env, cands, p)
    except EmptyBucket:
        if not fallback:
            raise
        if diagnostics is not None:
            diagnostics["empty_bucket"] += 1
        return -w
    return -w * (1.0 - _cos(e_bar, env.embedding(y_star)))


def harvest_transitions(
    env: Environment, cands: CandidateSet, params: StepRewardParams
) -> list[Transition]:
    """All L transitions of every candidate in the set."""
    x = cands.context
    cache: dict[Prefix, float] = {}
    out = []
    for y in cands.sids:
        for ell in range(1, env.L + 1):
            p = y[:ell]
            if p not in cache:
                cache[p] = step_reward(env, cands, params, x, p)
            out.append(Transition(x, p, cache[p], y[: ell + 1] if ell < env.L else None))
    return out


class _RowMapped:
    context_row: np.ndarray | None

    def row(self, x: int) -> int:
        return int(x) if self.context_row is None else int(self.context_row[x])


@dataclass
class ValueTable(_RowMapped):
    """Tabular V(x, prefix) over all depths 0..L; unvisited states read 0.0."""

    V: int
    L: int
    rows: int = 1
    gamma: float = 0.99
    lr: float = 0.1
    context_row: np.ndarray | None = None
    values: np.ndarray = field(default=None, repr=False)
    visited: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        n = level_offset(self.V, self.L + 1)
        if self.values is None:
            self.values = np.zeros((self.rows, n))
        if self.visited is None:
            self.visited = np.zeros((self.rows, n), dtype=bool)

    def estimate(self, x: int, p: Prefix) -> float:
        return float(self.values[self.row(x), node_id(p, self.V)])

    def is_cold(self, x: int, p: Prefix) -> bool:
        return not self.visited[self.row(x), node_id(p, self.V)]

    def set(self, x: int, p: Prefix, v: float) -> None:
        r, i = self.row(x), node_id(p, self.V)
        self.values[r, i] = v
        self.visited[r, i] = True

    def copy(self) -> "ValueTable":
        return ValueTable(
            self.V, self.L, self.rows, self.gamma, self.lr, self.context_row,
            self.values.copy(), self.visited.copy(),
        )

    def _index(self, batch: list[Transition]):
        rows = np.array([self.row(t.x) for t in batch])
        nid = np.array([node_id(t.prefix, self.V) for t in batch])
        nxt = np.array([-1 if t.next_prefix is None else node_id(t.next_prefix, self.V) for t in batch])
        r = np.array([t.reward for t in batch], dtype=np.float64)
        return rows, nid, nxt, r

    def fit(self, batch: list[Transition], steps: int) -> list[float]:
        if not batch:
            raise ValueError("empty TD batch")
        rows, nid, nxt, r = self._index(batch)
        flat = rows * self.values.shape[1] + nid
        keys, inv, counts = np.unique(flat, return_inverse=True, return_counts=True)
        vals = self.values.reshape(-1)
        terminal = nxt < 0
        nxt_flat = rows * self.values.shape[1] + np.where(terminal, 0, nxt)
        trace = []
        for _ in range(steps):
            boot = np.where(terminal, 0.0, self.gamma * vals[nxt_flat])
            err = r + boot - vals[flat]
            trace.append(float(np.mean(err**2)))
            vals[keys] += self.lr * np.bincount(inv, weights=err) / counts
        self.visited.reshape(-1)[keys] = True
        return trace


def td_target(value: ValueEstimator, r: float, x: int, next_prefix: Prefix | None, ell: int, L: int) -> float:
    """``r + gamma V(next)`` below depth L; ``r`` at depth L."""
    if ell > L:
        raise ValueError("depth beyond L")
    if ell == L:
        return float(r)
    return float(r + value.gamma * value.estimate(x, next_prefix))


def td_fit(value, batch: list[Transition], steps: int) -> list[float]:
    """Full-batch TD(0) sweeps; returns the mean squared TD error of each sweep.

    Every sweep computes targets from the values at sweep start and moves each
    visited state by ``lr`` times its mean TD error, i.e. one gradient step on
    the squared TD loss with the bootstrap held fixed.
    """
    return value.fit(batch, steps)


def prefix_feature_table(env: Environment, center: bool = True) -> list[np.ndarray]:
    """Unit-normalized mean embedding of the valid items under every prefix, per depth.

    With ``center`` the per-depth mean feature is subtracted. Item embeddings
    share a common component, which otherwise makes gradient TD on a linear
    value badly conditioned (the weights first fit that component as a bias).
    """
    V, L = env.V, env.L
    e = env.embeddings * env.leaf_valid[:, None]
    out = []
    for d in range(L + 1):
        g = e.reshape(V**d, -1, e.shape[1]).sum(axis=1)
        n = np.linalg.norm(g, axis=1, keepdims=True)
        f = np.divide(g, n, out=np.zeros_like(g), where=n > 0)
        if center and d > 0:
            f = f - f.mean(axis=0)
        out.append(f)
    return out


@dataclass
class LinearValue(_RowMapped):
    """V(x, p) = w[row, depth] . [phi(p), 1] with phi the prefix's mean item embedding."""

    features: list[np.ndarray]
    V: int
    L: int
    rows: int = 1
    gamma: float = 0.99
    lr: float = 0.5
    context_row: np.ndarray | None = None
    weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        dim = self.features[0].shape[1] + 1
        if self.weights is None:
            self.weights = np.zeros((self.rows, self.L + 1, dim))

    def _phi(self, p: Prefix) -> np.ndarray:
        return np.append(self.features[len(p)][prefix_index(p, self.V)], 1.0)

    def estimate(self, x: int, p: Prefix) -> float:
        return float(self.weights[self.row(x), len(p)] @ self._phi(p))

    def copy(self) -> "LinearValue":
        return LinearValue(
            self.features, self.V, self.L, self.rows, self.gamma, self.lr,
            self.context_row, self.weights.copy(),
        )

    def fit(self, batch: list[Transition], steps: int) -> list[float]:
        if not batch:
            raise ValueError("empty TD batch")
        rows = np.array([self.row(t.x) for t in batch])
        depth = np.array([len(t.prefix) for t in batch])
        phi = np.array([self._phi(t.prefix) for t in batch])
        terminal = np.array([t.next_prefix is None for t in batch])
        phi_next = np.array(
            [np.zeros(phi.shape[1]) if t.next_prefix is None else self._phi(t.next_prefix) for t in batch]
        )
        r = np.array([t.reward for t in batch])
        group = rows * (self.L + 1) + depth
        keys, inv, counts = np.unique(group, return_inverse=True, return_counts=True)
        W = self.weights.reshape(-1, phi.shape[1])
        trace = []
        for _ in range(steps):
            cur = np.einsum("ij,ij->i", W[group], phi)
            nxt = np.einsum("ij,ij->i", W[np.minimum(group + 1, len(W) - 1)], phi_next)
            err = r + np.where(terminal, 0.0, self.gamma * nxt) - cur
            trace.append(float(np.mean(err**2)))
            grad = np.zeros((len(keys), phi.shape[1]))
            np.add.at(grad, inv, err[:, None] * phi)
            W[keys] += self.lr * grad / counts[:, None]
        return trace


class OracleValue:
    """Exact expected terminal reward under the policy's continuation distribution.

    Computed per context by backward induction over the full trie; only usable
    at desk scale where V**L leaves fit in memory.
    """

    def __init__(self, env: Environment, policy: PolicyTable, temperature: float | None = None):
        self.env, self.policy, self.temperature = env, policy, temperature
        self._cache: dict[int, list[np.ndarray]] = {}

    def levels(self, x: int) -> list[np.ndarray]:
        if x not in self._cache:
            V = self.env.V
            vals = [self.env.all_rewards(x)]
            for pi in reversed(self.policy.dist_matrices(x, self.temperature)):
                vals.append((pi * vals[-1].reshape(-1, V)).sum(axis=1))
            self._cache[x] = list(reversed(vals))
        return self._cache[x]

    def estimate(self, x: int, p: Prefix) -> float:
        return float(self.levels(x)[len(p)][prefix_index(p, self.env.V)])


def save_value(value: ValueTable, path: str | Path) -> None:
    arrays = {
        "format_version": np.array(VALUE_FORMAT_VERSION),
        "shape": np.array([value.V, value.L, value.rows]),
        "gamma_lr": np.array([value.gamma, value.lr]),
        "values": value.values,
        "visited": value.visited,
    }
    if value.context_row is not None:
        arrays["context_row"] = np.asarray(value.context_row)
    Path(path).write_bytes(npz_bytes(arrays))


def load_value(path: str | Path) -> ValueTable:
    with np.load(path) as f:
        if int(f["format_version"]) != VALUE_FORMAT_VERSION:
            raise ValueError("unsupported value format")
        V, L, rows = (int(v) for v in f["shape"])
        gamma, lr = (float(v) for v in f["gamma_lr"])
        return ValueTable(
            V, L, rows, gamma, lr,
            f["context_row"].copy() if "context_row" in f else None,
            f["values"].copy(), f["visited"].copy(),
        )
