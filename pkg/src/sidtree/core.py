"""Token vocabulary, SID/prefix helpers and the prefix-trie index.

SIDs and prefixes are plain tuples of ints. Tokens are dense integers
``0..V-1`` at every level; the level-tagged ``<a_i><b_j><c_k>`` form is only
for display.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass
from typing import Generic, Iterator, Sequence, TypeVar

import numpy as np

Sid = tuple[int, ...]
Prefix = tuple[int, ...]

MAX_ENUMERATION = 10**7

T = TypeVar("T")


class BudgetExceeded(ValueError):
    """Raised when an exhaustive enumeration would not fit at desk scale."""


class EmptyBucket(ValueError):
    """Raised when a prefix bucket over a candidate set is empty."""


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


@dataclass(frozen=True)
class Vocab:
    size: int
    length: int

    def __post_init__(self) -> None:
        if self.size < 2:
            raise ValueError(f"vocabulary size must be >= 2, got {self.size}")
        if self.length < 1:
            raise ValueError(f"SID length must be >= 1, got {self.length}")

    def check_prefix(self, p: Sequence[int]) -> Prefix:
        if len(p) > self.length:
            raise ValueError(f"prefix {tuple(p)} longer than L={self.length}")
        for t in p:
            if not 0 <= t < self.size:
                raise ValueError(f"token {t} outside vocabulary of size {self.size}")
        return tuple(int(t) for t in p)

    def check_sid(self, y: Sequence[int]) -> Sid:
        if len(y) != self.length:
            raise ValueError(f"SID {tuple(y)} must have length {self.length}")
        return self.check_prefix(y)


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Independent generator for a named stream under a root seed."""
    words = [int(seed) & 0xFFFFFFFF]
    for n in names:
        h = hashlib.sha256(str(n).encode()).digest()
        words.append(int.from_bytes(h[:4], "little"))
    return np.random.default_rng(words)


def lcp_len(a: Sequence[int], b: Sequence[int]) -> int:
    """Length of the longest common prefix of two equal-length SIDs."""
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    n = 0
    for u, v in zip(a, b):
        if u != v:
            break
        n += 1
    return n


def enumerate_all_sids(V: int, L: int) -> list[Sid]:
    """All V**L SIDs in lexicographic order."""
    if V**L > MAX_ENUMERATION:
        raise BudgetExceeded(f"V^L = {V}^{L} exceeds {MAX_ENUMERATION}")
    return list(itertools.product(range(V), repeat=L))


def level_offset(V: int, depth: int) -> int:
    """Number of trie nodes strictly shallower than ``depth``."""
    return (V**depth - 1) // (V - 1)


def prefix_index(p: Sequence[int], V: int) -> int:
    """Position of a prefix among the V**len(p) prefixes of its depth."""
    idx = 0
    for t in p:
        idx = idx * V + t
    return idx


def node_id(p: Sequence[int], V: int) -> int:
    """Dense breadth-first id of a prefix in the complete V-ary trie."""
    return level_offset(V, len(p)) + prefix_index(p, V)


def prefix_from_index(idx: int, depth: int, V: int) -> Prefix:
    out = []
    for _ in range(depth):
        idx, t = divmod(idx, V)
        out.append(t)
    return tuple(reversed(out))


def render_sid(y: Sequence[int]) -> str:
    """Level-tagged rendering, e.g. ``<a_3><b_0><c_12>``."""
    letters = "abcdefghijklmnopqrstuvwxyz"
    return "".join(f"<{letters[i % 26]}_{t}>" for i, t in enumerate(y))


class PrefixTrie(Generic[T]):
    """Sparse map from prefixes of the complete V-ary depth-L trie to payloads."""

    def __init__(self, vocab: Vocab):
        self.vocab = vocab
        self._data: dict[Prefix, T] = {}
        self._children: dict[Prefix, set[int]] = {}

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, p: Prefix) -> bool:
        return p in self._data

    def __getitem__(self, p: Prefix) -> T:
        return self._data[p]

    def __setitem__(self, p: Prefix, payload: T) -> None:
        p = self.vocab.check_prefix(p)
        if p not in self._data and p:
            self._children.setdefault(p[:-1], set()).add(p[-1])
        self._data[p] = payload

    def get(self, p: Prefix, default: T | None = None) -> T | None:
        return self._data.get(p, default)

    def children(self, p: Prefix) -> list[int]:
        """Stored child tokens of ``p``, sorted."""
        return sorted(self._children.get(p, ()))

    def items(self) -> Iterator[tuple[Prefix, T]]:
        return iter(self._data.items())

    def at_depth(self, depth: int) -> list[Prefix]:
        return sorted(p for p in self._data if len(p) == depth)
