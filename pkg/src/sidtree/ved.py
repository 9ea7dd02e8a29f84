"""Value-guided budgeted decoding over the SID prefix tree.

The search warm-starts from a narrow beam, then repeats UCB selection,
depth-gated one-child expansion and statistics backup until the forward-token
budget would be exceeded. Expansions that would push the cost past the budget
are refused, so ``cost <= budget`` holds at every point.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import ConfigError, Prefix, PrefixTrie, Sid, Vocab
from .policy import CandidateSet, CostMeter, PolicyTable, beam_levels, entropy_of
from .value import ValueEstimator

RULES = ("joint", "value", "entropy")
GATE_TOL = 1e-12


@dataclass
class VedConfig:
    budget: int = 33
    lam: float = 0.1
    beta: float = 1.0
    init_width: int = 8
    output_size: int = 16
    rule: str = "joint"
    max_traversals: int | None = None  # None -> 50 * budget

    def __post_init__(self) -> None:
        if self.rule not in RULES:
            raise ConfigError(f"unknown expansion rule {self.rule!r}; expected one of {RULES}")
        if self.output_size < 1:
            raise ConfigError("output_size must be >= 1")
        if not 1 <= self.init_width <= self.output_size:
            raise ConfigError("init_width must be in [1, output_size]")
        if self.budget < 1:
            raise ConfigError("budget must be positive")

    @property
    def traversal_cap(self) -> int:
        return 50 * self.budget if self.max_traversals is None else self.max_traversals


@dataclass
class SearchNode:
    prefix: Prefix
    terminal: bool
    value: float | None = None
    entropy: float | None = None
    priority: float | None = None
    visits: int = 0
    dist: np.ndarray | None = field(default=None, repr=False)
    children: dict[int, "SearchNode"] = field(default_factory=dict, repr=False)
    n_valid: int = 0
    inv_sqrt_visits: float = 1.0  # 1 / sqrt(visits + 1), kept in step with visits
    # children ordered by token, and valid tokens not yet instantiated
    kids: list["SearchNode"] = field(default_factory=list, repr=False)
    avail: np.ndarray | None = field(default=None, repr=False)

    @property
    def depth(self) -> int:
        return len(self.prefix)

    @property
    def evaluated(self) -> bool:
        return self.priority is not None

    def unexpanded(self) -> np.ndarray:
        """Valid child tokens not yet instantiated."""
        if self.terminal or self.avail is None:
            return np.empty(0, dtype=int)
        return np.flatnonzero(self.avail)

    @property
    def fully_expanded(self) -> bool:
        return self.terminal or len(self.children) >= self.n_valid

    def attach(self, tok: int, child: "SearchNode") -> None:
        self.children[tok] = child
        bisect.insort(self.kids, child, key=lambda n: n.prefix[-1])
        self.avail[tok] = False


@dataclass
class ExpansionEvent:
    traversal: int
    prefix: Prefix
    child: int
    priority: float
    depth_mean: float


@dataclass
class SearchStats:
    cost: int = 0
    budget: int = 0
    init_cost: int = 0
    traversals: int = 0
    expansions_triggered: int = 0
    expansions_gated: int = 0
    expansions_refused: int = 0
    exhausted: bool = False
    stalled: bool = False
    nodes_per_depth: list[int] = field(default_factory=list)
    from_leaves: int = 0
    from_completion: int = 0
    from_init_beam: int = 0
    events: list[ExpansionEvent] = field(default_factory=list)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["events"] = [
            {**asdict(e), "prefix": list(e.prefix)} for e in self.events
        ]
        return rec


def priority(node: SearchNode, lam: float, rule: str = "joint") -> float:
    """Prefix priority: value plus entropy bonus below depth L, value at depth L."""
    if node.value is None:
        raise RuntimeError(f"node {node.prefix} has not been evaluated")
    if rule == "value":
        return node.value
    if rule == "entropy":
        return 0.0 if node.terminal else float(node.entropy)
    if node.terminal:
        return node.value
    return node.value + lam * node.entropy


def ucb(node: SearchNode, n_root: int, beta: float) -> float:
    if node.priority is None:
        raise RuntimeError(f"node {node.prefix} has not been evaluated")
    return node.priority + beta * math.sqrt(math.log(n_root + 1) / (node.visits + 1))


class SearchTree:
    def __init__(self, policy: PolicyTable, value: ValueEstimator, x: int, cfg: VedConfig):
        self.policy, self.value, self.x, self.cfg = policy, value, x, cfg
        self.L = policy.L
        self.nodes: PrefixTrie[SearchNode] = PrefixTrie(Vocab(policy.V, policy.L))
        self.meter = CostMeter(policy, x)
        self.depth_count = np.zeros(self.L + 1, dtype=np.int64)
        self.depth_sum = np.zeros(self.L + 1)
        self.n_root = 0
        self.exhausted = False
        self.init_leaves: list[Sid] = []
        self.open: set[Prefix] = set()
        self.stats = SearchStats(budget=cfg.budget)

    @property
    def cost(self) -> int:
        return self.meter.cost

    @property
    def root(self) -> SearchNode:
        return self.nodes[()]

    def depth_mean(self, depth: int) -> float:
        return float(self.depth_sum[depth] / self.depth_count[depth])

    def _evaluate(self, node: SearchNode) -> None:
        node.value = float(self.value.estimate(self.x, node.prefix))
        if not node.terminal:
            node.dist = self.meter.dist(node.prefix)
            node.entropy = entropy_of(node.dist)
            node.avail = node.dist > 0
            node.n_valid = int(np.count_nonzero(node.avail))
        node.priority = priority(node, self.cfg.lam, self.cfg.rule)

    def _add(self, p: Prefix) -> SearchNode:
        node = SearchNode(p, terminal=len(p) == self.L)
        self._evaluate(node)
        self.nodes[p] = node
        if not node.fully_expanded:
            self.open.add(p)
        if p:
            parent = self.nodes[p[:-1]]
            parent.attach(p[-1], node)
            if parent.fully_expanded:
                self.open.discard(parent.prefix)
        return node

    def dump(self) -> list[dict]:
        return [
            {
                "prefix": list(p),
                "value": n.value,
                "entropy": n.entropy,
                "priority": n.priority,
                "visits": n.visits,
                "children": sorted(n.children),
            }
            for p, n in sorted(self.nodes.items())
        ]


def initialize(policy: PolicyTable, value: ValueEstimator, x: int, cfg: VedConfig) -> SearchTree:
    """Warm-start tree from a width-``init_width`` beam; every node evaluated once."""
    tree = SearchTree(policy, value, x, cfg)
    levels = beam_levels(tree.meter, policy.L, cfg.init_width)
    if tree.cost > cfg.budget:
        raise ConfigError(f"budget {cfg.budget} below warm-start cost {tree.cost}")
    for level in levels:
        for _, p in level:
            node = tree._add(p)
            tree.depth_count[node.depth] += 1
            tree.depth_sum[node.depth] += node.priority
    tree.init_leaves = [p for _, p in levels[-1]]
    tree.stats.init_cost = tree.cost
    return tree


def select_path(tree: SearchTree) -> list[SearchNode]:
    """Descend by max UCB (ties: smallest token) to a childless or terminal node."""
    node = tree.root
    path = [node]
    bonus = tree.cfg.beta * math.sqrt(math.log(tree.n_root + 1))
    while node.kids and not node.terminal:
        # same ordering as ucb(); kids are token-sorted so strict > keeps the smallest token
        best, best_u = None, -math.inf
        for kid in node.kids:
            u = kid.priority + bonus * kid.inv_sqrt_visits
            if u > best_u:
                best, best_u = kid, u
        node = best
        path.append(node)
    for n in path:
        n.visits += 1
        n.inv_sqrt_visits = 1.0 / math.sqrt(n.visits + 1)
    tree.n_root += 1
    return path


def gated_expand(
    tree: SearchTree, path: list[SearchNode], rng: np.random.Generator
) -> list[SearchNode]:
    """Add at most one child to every non-full path node passing its depth gate."""
    new = []
    for node in path:
        if node.fully_expanded:
            continue
        gate = tree.depth_mean(node.depth)
        if node.priority < gate - GATE_TOL:
            tree.stats.expansions_gated += 1
            continue
        w = np.where(node.avail, node.dist, 0.0)
        tok = int(rng.choice(len(w), p=w / w.sum()))
        child = node.prefix + (tok,)
        if len(child) < tree.L and tree.cost + 1 > tree.cfg.budget:
            tree.stats.expansions_refused += 1
            tree.exhausted = True
            continue
        new.append(tree._add(child))
        tree.stats.expansions_triggered += 1
        tree.stats.events.append(
            ExpansionEvent(tree.n_root, node.prefix, tok, node.priority, gate)
        )
    return new


def backprop(tree: SearchTree, new_nodes: list[SearchNode]) -> None:
    """Fold new nodes into the per-depth priority aggregates.

    Visit counts are charged once per traversal in ``select_path``; new nodes
    start unvisited.
    """
    for node in new_nodes:
        tree.depth_count[node.depth] += 1
        tree.depth_sum[node.depth] += node.priority


def _stalled(tree: SearchTree) -> bool:
    return all(
        tree.nodes[p].priority < tree.depth_mean(len(p)) - GATE_TOL for p in tree.open
    )


def extract(tree: SearchTree, size: int) -> tuple[list[Sid], dict[str, int]]:
    """Leaves by value, then cached-distribution completions, then warm-start beams."""
    L = tree.L
    leaves = [n for _, n in tree.nodes.items() if n.terminal]
    leaves.sort(key=lambda n: (-n.value, n.prefix))
    out: dict[Sid, None] = {}
    for n in leaves[:size]:
        out[n.prefix] = None
    counts = {"from_leaves": len(out), "from_completion": 0, "from_init_beam": 0}
    if len(out) < size:
        parents = [n for _, n in tree.nodes.items() if n.depth == L - 1 and n.dist is not None]
        parents.sort(key=lambda n: (-n.priority, n.prefix))
        queues = []
        for n in parents:
            toks = np.flatnonzero(n.dist > 0)
            toks = toks[np.lexsort((toks, -n.dist[toks]))]
            queues.append([n.prefix + (int(t),) for t in toks])
        rank = 0
        while len(out) < size and any(rank < len(q) for q in queues):
            for q in queues:
                if rank < len(q) and q[rank] not in out and len(out) < size:
                    out[q[rank]] = None
                    counts["from_completion"] += 1
            rank += 1
    for y in tree.init_leaves:
        if len(out) >= size:
            break
        if y not in out:
            out[y] = None
            counts["from_init_beam"] += 1
    return list(out), counts


def ved_decode(
    policy: PolicyTable,
    value: ValueEstimator,
    x: int,
    cfg: VedConfig,
    seed: int | np.random.Generator = 0,
    keep_tree: bool = False,
) -> tuple[CandidateSet, SearchStats]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tree = initialize(policy, value, x, cfg)
    stall_known = None
    while not tree.exhausted and tree.stats.traversals < cfg.traversal_cap:
        path = select_path(tree)
        tree.stats.traversals += 1
        new = gated_expand(tree, path, rng)
        backprop(tree, new)
        if not tree.open:
            break
        if new or tree.exhausted:
            stall_known = None
        if not new:
            # gates and the open set only move on expansion, so the check is cached
            if stall_known is None:
                stall_known = _stalled(tree)
            if stall_known:
                tree.stats.stalled = True
                break
    sids, counts = extract(tree, cfg.output_size)
    stats = tree.stats
    stats.cost = tree.cost
    stats.exhausted = tree.exhausted
    stats.nodes_per_depth = [int(c) for c in tree.depth_count]
    stats.from_leaves = counts["from_leaves"]
    stats.from_completion = counts["from_completion"]
    stats.from_init_beam = counts["from_init_beam"]
    values = np.array([value.estimate(x, y) for y in sids])
    cands = CandidateSet.from_sids(policy, x, sids, values=values, cost=tree.cost, decoder="ved")
    if keep_tree:
        cands.meta["tree"] = tree
    return cands, stats
