"""Decision trees on the unit cube and the BART tree prior.

A node at depth ``d`` splits with probability ``alpha * (1 + d) ** -beta``;
the split variable is drawn from the split probabilities ``s`` and the
cutpoint uniformly on the node's box along that variable. Routing sends
``x`` left iff ``x[j] <= c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Mapping

import numpy as np

DEPTH_CAP = 12
DEFAULT_MOVE_PROBS = {"grow": 0.3, "prune": 0.3, "change": 0.4}
MOVES = ("grow", "prune", "change")


class InvalidTreeError(ValueError):
    pass


@dataclass(frozen=True)
class TreePriorConfig:
    """Hyperparameters of the sum-of-trees prior.

    ``sigma_mu2`` is the total signal variance; each leaf value has prior
    variance ``sigma_mu2 / n_trees``.
    """

    n_features: int
    alpha: float = 0.95
    beta: float = 2.0
    n_trees: int = 200
    sigma_mu2: float = 1.0
    split_probs: tuple[float, ...] | None = None
    depth_cap: int = DEPTH_CAP

    def __post_init__(self):
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.beta < 0:
            raise ValueError("depth exponent must be >= 0")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not self.sigma_mu2 > 0:
            raise ValueError("sigma_mu2 must be > 0")
        if self.split_probs is not None:
            s = np.asarray(self.split_probs, dtype=float)
            if s.shape != (self.n_features,) or np.any(s < 0) or not np.isclose(s.sum(), 1.0):
                raise ValueError("split_probs must be a probability vector of length n_features")
            object.__setattr__(self, "split_probs", tuple(float(v) for v in s))

    @cached_property
    def s(self) -> np.ndarray:
        if self.split_probs is None:
            return np.full(self.n_features, 1.0 / self.n_features)
        return np.asarray(self.split_probs)

    @cached_property
    def _log_s(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.s)

    @cached_property
    def _cdf(self) -> np.ndarray:
        return np.cumsum(self.s)

    @property
    def leaf_variance(self) -> float:
        return self.sigma_mu2 / self.n_trees

    def split_prob(self, depth: int) -> float:
        if depth >= self.depth_cap:
            return 0.0
        return self.alpha * (1.0 + depth) ** (-self.beta)

    def draw_split_var(self, rng: np.random.Generator) -> int:
        u = rng.random() * self._cdf[-1]
        j = int(np.searchsorted(self._cdf, u, side="right"))
        return min(j, self.n_features - 1)

    def without(self, columns) -> TreePriorConfig:
        """Copy with ``columns`` excluded from splitting (``s`` renormalized)."""
        s = self.s.copy()
        s[list(columns)] = 0.0
        if s.sum() <= 0:
            raise ValueError("cannot exclude every column from splitting")
        return replace(self, split_probs=tuple(s / s.sum()))


@dataclass(frozen=True)
class Node:
    split_var: int = -1
    cutpoint: float = 0.0
    left: int = -1
    right: int = -1
    mu: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.split_var < 0


class DecisionTree:
    """Immutable binary tree; node 0 is the root, leaves carry ``mu``."""

    def __init__(self, nodes: Mapping[int, Node], n_features: int):
        self.nodes = dict(nodes)
        self.n_features = int(n_features)

    @classmethod
    def stump(cls, n_features: int, mu: float = 0.0) -> DecisionTree:
        return cls({0: Node(mu=mu)}, n_features)

    def __eq__(self, other):
        return isinstance(other, DecisionTree) and self.n_features == other.n_features and self.nodes == other.nodes

    def __hash__(self):
        return hash((self.n_features, tuple(sorted(self.nodes.items()))))

    def __repr__(self):
        return f"DecisionTree(leaves={self.n_leaves}, depth={self.depth})"

    @cached_property
    def _walk(self):
        # preorder walk: (ids, parent, depth, leaf ids left-to-right)
        order, parent, depth, leaves = [], {0: -1}, {0: 0}, []
        stack = [0]
        while stack:
            k = stack.pop()
            order.append(k)
            nd = self.nodes[k]
            if nd.is_leaf:
                leaves.append(k)
            else:
                for child in (nd.right, nd.left):
                    parent[child] = k
                    depth[child] = depth[k] + 1
                    stack.append(child)
        return order, parent, depth, leaves

    @property
    def preorder(self) -> list[int]:
        return self._walk[0]

    @property
    def parent(self) -> dict[int, int]:
        return self._walk[1]

    @property
    def node_depth(self) -> dict[int, int]:
        return self._walk[2]

    @property
    def leaf_ids(self) -> list[int]:
        """Leaf node ids in left-to-right order (leaf index = position)."""
        return self._walk[3]

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_ids)

    @property
    def depth(self) -> int:
        return max(self.node_depth[k] for k in self.leaf_ids)

    @property
    def internal_ids(self) -> list[int]:
        return [k for k in self.preorder if not self.nodes[k].is_leaf]

    @property
    def nog_ids(self) -> list[int]:
        """Internal nodes whose children are both leaves."""
        return [
            k for k in self.internal_ids
            if self.nodes[self.nodes[k].left].is_leaf and self.nodes[self.nodes[k].right].is_leaf
        ]

    @cached_property
    def leaf_values(self) -> np.ndarray:
        return np.array([self.nodes[k].mu for k in self.leaf_ids])

    @cached_property
    def leaf_position(self) -> np.ndarray:
        """Array mapping node id to leaf index (-1 for internal nodes)."""
        pos = np.full(max(self.nodes) + 1, -1, dtype=np.intp)
        pos[self.leaf_ids] = np.arange(self.n_leaves)
        return pos

    def node_bounds(self, k: int, j: int) -> tuple[float, float]:
        """Extent of node ``k``'s box along variable ``j``."""
        lo, hi = 0.0, 1.0
        parent = self.parent
        child, p = k, parent[k]
        while p >= 0:
            nd = self.nodes[p]
            if nd.split_var == j:
                if nd.left == child:
                    hi = min(hi, nd.cutpoint)
                else:
                    lo = max(lo, nd.cutpoint)
            child, p = p, parent[p]
        return lo, hi

    def node_box(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Hyperrectangle ``(lo, hi)`` of node ``k``."""
        lo, hi = np.zeros(self.n_features), np.ones(self.n_features)
        parent = self.parent
        child, p = k, parent[k]
        while p >= 0:
            nd = self.nodes[p]
            j = nd.split_var
            if nd.left == child:
                hi[j] = min(hi[j], nd.cutpoint)
            else:
                lo[j] = max(lo[j], nd.cutpoint)
            child, p = p, parent[p]
        return lo, hi

    @cached_property
    def _arrays(self):
        size = max(self.nodes) + 1
        var = np.full(size, -1, dtype=np.intp)
        cut = np.zeros(size)
        left = np.full(size, -1, dtype=np.intp)
        right = np.full(size, -1, dtype=np.intp)
        for k, nd in self.nodes.items():
            var[k], cut[k], left[k], right[k] = nd.split_var, nd.cutpoint, nd.left, nd.right
        return var, cut, left, right

    def route(self, X: np.ndarray, start: int = 0) -> np.ndarray:
        """Leaf node id reached by each row of ``X`` starting from ``start``."""
        var, cut, left, right = self._arrays
        node = np.full(X.shape[0], start, dtype=np.intp)
        active = np.flatnonzero(var[node] >= 0)
        while active.size:
            nd = node[active]
            go_left = X[active, var[nd]] <= cut[nd]
            node[active] = np.where(go_left, left[nd], right[nd])
            active = active[var[node[active]] >= 0]
        return node

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index (left-to-right position) for each row of ``X``."""
        return self.leaf_position[self.route(np.atleast_2d(X))]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_values[self.apply(X)]

    def subtree_leaves(self, k: int) -> list[int]:
        out, stack = [], [k]
        while stack:
            j = stack.pop()
            nd = self.nodes[j]
            if nd.is_leaf:
                out.append(j)
            else:
                stack.extend((nd.right, nd.left))
        return out

    def with_leaf_values(self, values) -> DecisionTree:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_leaves,):
            raise ValueError(f"expected {self.n_leaves} leaf values")
        nodes = dict(self.nodes)
        for k, v in zip(self.leaf_ids, values):
            nodes[k] = replace(nodes[k], mu=float(v))
        return DecisionTree(nodes, self.n_features)

    def validate(self) -> None:
        for k in self.internal_ids:
            nd = self.nodes[k]
            j = nd.split_var
            if not 0 <= j < self.n_features:
                raise InvalidTreeError(f"node {k}: split variable {j} out of range")
            lo, hi = self.node_bounds(k, j)
            if not lo < nd.cutpoint < hi:
                raise InvalidTreeError(f"node {k}: cutpoint {nd.cutpoint} outside ({lo}, {hi})")

    @property
    def used_variables(self) -> set[int]:
        return {self.nodes[k].split_var for k in self.internal_ids}

    def to_dict(self) -> dict:
        nodes = []
        for k in self.preorder:
            nd = self.nodes[k]
            if nd.is_leaf:
                nodes.append({"id": k, "kind": "leaf", "split_var": None, "cutpoint": None,
                              "left": None, "right": None, "mu": nd.mu})
            else:
                nodes.append({"id": k, "kind": "split", "split_var": nd.split_var, "cutpoint": nd.cutpoint,
                              "left": nd.left, "right": nd.right, "mu": None})
        return {"n_features": self.n_features, "nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict) -> DecisionTree:
        nodes = {}
        for rec in d["nodes"]:
            if rec["kind"] == "leaf":
                nodes[int(rec["id"])] = Node(mu=float(rec["mu"]))
            else:
                nodes[int(rec["id"])] = Node(int(rec["split_var"]), float(rec["cutpoint"]),
                                             int(rec["left"]), int(rec["right"]))
        tree = cls(nodes, d["n_features"])
        tree.validate()
        return tree


def _draw_cutpoint(lo: float, hi: float, rng: np.random.Generator) -> float:
    while True:
        c = float(rng.uniform(lo, hi))
        if lo < c < hi:
            return c


def sample_tree_from_prior(cfg: TreePriorConfig, rng: np.random.Generator) -> DecisionTree:
    """Draw topology, decision rules and leaf values from the prior."""
    nodes: dict[int, Node] = {}
    sd = math.sqrt(cfg.leaf_variance)
    next_id = 1
    stack = [(0, 0, np.zeros(cfg.n_features), np.ones(cfg.n_features))]
    while stack:
        k, depth, lo, hi = stack.pop()
        if rng.random() < cfg.split_prob(depth):
            j = cfg.draw_split_var(rng)
            c = _draw_cutpoint(lo[j], hi[j], rng)
            left, right = next_id, next_id + 1
            next_id += 2
            nodes[k] = Node(j, c, left, right)
            lhi = hi.copy()
            lhi[j] = c
            rlo = lo.copy()
            rlo[j] = c
            # pushed right first so the left subtree is drawn first
            stack.append((right, depth + 1, rlo, hi))
            stack.append((left, depth + 1, lo, lhi))
        else:
            nodes[k] = Node()
    tree = DecisionTree(nodes, cfg.n_features)
    return tree.with_leaf_values(rng.normal(0.0, sd, size=tree.n_leaves))


def _log_rule_density(cfg: TreePriorConfig, j: int, lo: float, hi: float) -> float:
    return float(cfg._log_s[j]) - math.log(hi - lo)


def log_tree_prior(tree: DecisionTree, cfg: TreePriorConfig) -> float:
    """Log prior density of topology and decision rules (leaf values excluded)."""
    total = 0.0
    depths = tree.node_depth
    for k in tree.preorder:
        nd = tree.nodes[k]
        p = cfg.split_prob(depths[k])
        if nd.is_leaf:
            total += math.log1p(-p)
            continue
        if p == 0.0:
            return -math.inf
        j = nd.split_var
        lo, hi = tree.node_bounds(k, j)
        if not lo < nd.cutpoint < hi:
            raise InvalidTreeError(f"node {k}: cutpoint {nd.cutpoint} outside ({lo}, {hi})")
        total += math.log(p) + _log_rule_density(cfg, j, lo, hi)
    return total


@dataclass(frozen=True)
class Proposal:
    """A proposed tree plus ``log Q(old | new) - log Q(new | old)``.

    ``valid`` is False for CHANGE proposals that would leave a descendant's
    cutpoint outside its box; such proposals are rejected outright.
    """

    kind: str
    tree: DecisionTree
    log_ratio: float
    node: int
    valid: bool = True


def _growable_leaves(tree: DecisionTree, cfg: TreePriorConfig) -> list[int]:
    return [k for k in tree.leaf_ids if cfg.split_prob(tree.node_depth[k]) > 0.0]


def move_probabilities(tree: DecisionTree, cfg: TreePriorConfig, move_probs=None) -> dict[str, float]:
    """Move probabilities renormalized over the moves feasible for ``tree``."""
    move_probs = DEFAULT_MOVE_PROBS if move_probs is None else move_probs
    has_internal = tree.n_leaves > 1
    feasible = {
        "grow": bool(_growable_leaves(tree, cfg)),
        "prune": has_internal,
        "change": has_internal,
    }
    w = {m: float(move_probs.get(m, 0.0)) if feasible[m] else 0.0 for m in MOVES}
    total = sum(w.values())
    if total <= 0:
        raise ValueError("no feasible tree move")
    return {m: v / total for m, v in w.items()}


def _fresh_ids(tree: DecisionTree, n: int) -> list[int]:
    out, k = [], 1
    while len(out) < n:
        if k not in tree.nodes:
            out.append(k)
        k += 1
    return out


def propose_move(tree: DecisionTree, cfg: TreePriorConfig, move_probs=None,
                 rng: np.random.Generator | None = None) -> Proposal:
    """Draw a GROW, PRUNE or CHANGE proposal from ``tree``."""
    probs = move_probabilities(tree, cfg, move_probs)
    u = rng.random()
    if u < probs["grow"]:
        kind = "grow"
    elif u < probs["grow"] + probs["prune"]:
        kind = "prune"
    else:
        kind = "change"
    if kind == "change" and probs["change"] == 0.0:
        kind = "prune" if probs["prune"] > 0 else "grow"

    if kind == "grow":
        leaves = _growable_leaves(tree, cfg)
        k = leaves[int(rng.integers(len(leaves)))]
        j = cfg.draw_split_var(rng)
        lo, hi = tree.node_bounds(k, j)
        c = _draw_cutpoint(lo, hi, rng)
        left, right = _fresh_ids(tree, 2)
        nodes = dict(tree.nodes)
        nodes[k] = Node(j, c, left, right)
        nodes[left] = Node()
        nodes[right] = Node()
        new = DecisionTree(nodes, tree.n_features)
        back = move_probabilities(new, cfg, move_probs)
        log_fwd = math.log(probs["grow"]) - math.log(len(leaves)) + _log_rule_density(cfg, j, lo, hi)
        log_back = math.log(back["prune"]) - math.log(len(new.nog_ids))
        return Proposal("grow", new, log_back - log_fwd, k)

    if kind == "prune":
        nogs = tree.nog_ids
        k = nogs[int(rng.integers(len(nogs)))]
        nd = tree.nodes[k]
        j = nd.split_var
        lo, hi = tree.node_bounds(k, j)
        nodes = dict(tree.nodes)
        del nodes[nd.left], nodes[nd.right]
        nodes[k] = Node()
        new = DecisionTree(nodes, tree.n_features)
        back = move_probabilities(new, cfg, move_probs)
        log_fwd = math.log(probs["prune"]) - math.log(len(nogs))
        log_back = (math.log(back["grow"]) - math.log(len(_growable_leaves(new, cfg)))
                    + _log_rule_density(cfg, j, lo, hi))
        return Proposal("prune", new, log_back - log_fwd, k)

    internal = tree.internal_ids
    k = internal[int(rng.integers(len(internal)))]
    nd = tree.nodes[k]
    j = cfg.draw_split_var(rng)
    lo, hi = tree.node_bounds(k, j)
    old_lo, old_hi = tree.node_bounds(k, nd.split_var)
    c = _draw_cutpoint(lo, hi, rng)
    nodes = dict(tree.nodes)
    nodes[k] = replace(nd, split_var=j, cutpoint=c)
    new = DecisionTree(nodes, tree.n_features)
    log_ratio = _log_rule_density(cfg, nd.split_var, old_lo, old_hi) - _log_rule_density(cfg, j, lo, hi)
    try:
        new.validate()
    except InvalidTreeError:
        return Proposal("change", tree, -math.inf, k, valid=False)
    return Proposal("change", new, log_ratio, k)


def leaf_regions(tree: DecisionTree) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """``(leaf index, lo, hi)`` for each leaf, left to right.

    Each box is half-open: ``lo < x <= hi`` except on the unit-cube boundary.
    """
    return [(ell, *tree.node_box(k)) for ell, k in enumerate(tree.leaf_ids)]


def assign_leaf(tree: DecisionTree, x) -> int:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return int(tree.apply(x)[0])


def leaf_count_distribution(cfg: TreePriorConfig, max_leaves: int) -> np.ndarray:
    """Exact prior pmf of the leaf count, for counts ``1..max_leaves``."""
    # dist[d][n] = P(subtree rooted at depth d has n leaves)
    dists = {}
    for d in range(cfg.depth_cap, -1, -1):
        p = cfg.split_prob(d)
        pmf = np.zeros(max_leaves + 1)
        pmf[1] = 1.0 - p
        if p > 0:
            child = dists[d + 1]
            pmf += p * np.convolve(child, child)[: max_leaves + 1]
        dists[d] = pmf
    return dists[0][1:]


def expected_leaf_count(cfg: TreePriorConfig) -> float:
    e = 1.0
    for d in range(cfg.depth_cap - 1, -1, -1):
        p = cfg.split_prob(d)
        e = (1.0 - p) + 2.0 * p * e
    return e
