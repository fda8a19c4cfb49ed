"""Binary regression trees stored as flat parallel arrays.

Node slots live in parallel numpy arrays so the sampling kernel can mutate a
tree in place and undo a rejected move in O(1). Slot 0 is always the root.
``feat[s] >= 0`` marks an internal node splitting on that feature, ``-1`` a
leaf, ``-2`` a free slot. Routing a row with a missing value (NaN) at the
split feature follows the split's ``missing_goes`` direction; an observed
value goes left iff ``value <= threshold``.

The proposal/likelihood helpers here are the pure-Python reference for the
compiled kernel; both consume pre-drawn uniforms in the same fixed layout so
the two backends produce bit-identical chains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FEAT_LEAF = -1
FEAT_FREE = -2

# meta slots
M_NHIGH = 0    # one past the highest slot ever used
M_FREETOP = 1  # free-stack depth
M_NLEAF = 2
M_NINT = 3
M_ACCEPT = 4   # last update: structure move accepted
M_MOVE = 5     # last update: move code (-1 when no structural move was possible)
M_VALID = 6    # last update: proposal reached the MH test

GROW, PRUNE, CHANGE, SWAP = 0, 1, 2, 3
MOVE_NAMES = {GROW: "grow", PRUNE: "prune", CHANGE: "change", SWAP: "swap", -1: "noop"}


class Tree:
    """One regression tree. All mutation goes through the module helpers."""

    __slots__ = ("feat", "thr", "missl", "left", "right", "depth", "leafval",
                 "free", "meta", "pre_cache")

    def __init__(self, cap: int = 8):
        self.feat = np.full(cap, FEAT_FREE, dtype=np.int32)
        self.thr = np.zeros(cap, dtype=np.float64)
        self.missl = np.zeros(cap, dtype=np.uint8)
        self.left = np.full(cap, -1, dtype=np.int32)
        self.right = np.full(cap, -1, dtype=np.int32)
        self.depth = np.zeros(cap, dtype=np.int32)
        self.leafval = np.zeros(cap, dtype=np.float64)
        self.free = np.zeros(cap, dtype=np.int32)
        self.meta = np.zeros(8, dtype=np.int64)
        self.pre_cache = None

    @classmethod
    def stump(cls, value: float = 0.0) -> "Tree":
        t = cls()
        t.feat[0] = FEAT_LEAF
        t.leafval[0] = value
        t.meta[M_NHIGH] = 1
        t.meta[M_NLEAF] = 1
        return t

    # -- introspection ----------------------------------------------------

    @property
    def n_leaves(self) -> int:
        return int(self.meta[M_NLEAF])

    @property
    def n_internal(self) -> int:
        return int(self.meta[M_NINT])

    @property
    def nhigh(self) -> int:
        return int(self.meta[M_NHIGH])

    def capacity(self) -> int:
        return len(self.feat)

    def is_leaf(self, s: int) -> bool:
        return self.feat[s] == FEAT_LEAF

    def active_slots(self) -> np.ndarray:
        """Active node slots, ascending."""
        f = self.feat[: self.nhigh]
        return np.nonzero(f != FEAT_FREE)[0]

    def leaf_slots(self) -> np.ndarray:
        f = self.feat[: self.nhigh]
        return np.nonzero(f == FEAT_LEAF)[0]

    def internal_slots(self) -> np.ndarray:
        f = self.feat[: self.nhigh]
        return np.nonzero(f >= 0)[0]

    def prunable_slots(self) -> np.ndarray:
        """Internal nodes whose children are both leaves, ascending."""
        out = []
        for s in self.internal_slots():
            if self.is_leaf(self.left[s]) and self.is_leaf(self.right[s]):
                out.append(s)
        return np.asarray(out, dtype=np.int64)

    def swap_pairs(self) -> list[tuple[int, int]]:
        """(parent, internal child) pairs, parent ascending, left before right."""
        out = []
        for s in self.internal_slots():
            if not self.is_leaf(self.left[s]):
                out.append((int(s), int(self.left[s])))
            if not self.is_leaf(self.right[s]):
                out.append((int(s), int(self.right[s])))
        return out

    def parent_of(self, node: int) -> int:
        """Parent slot, or -1 for the root. O(nhigh) scan."""
        l, r, f = self.left, self.right, self.feat
        for s in range(self.nhigh):
            if f[s] >= 0 and (l[s] == node or r[s] == node):
                return s
        return -1

    def subtree_slots(self, node: int) -> list[int]:
        """All slots under (and including) node, preorder."""
        out, stack = [], [node]
        while stack:
            s = stack.pop()
            out.append(s)
            if self.feat[s] >= 0:
                stack.append(int(self.right[s]))
                stack.append(int(self.left[s]))
        return out

    def leaf_descendants(self, node: int) -> list[int]:
        return [s for s in self.subtree_slots(node) if self.is_leaf(s)]

    # -- slot management --------------------------------------------------

    def ensure_free(self, k: int = 2) -> None:
        """Guarantee k allocatable slots (kernels never resize)."""
        avail = self.capacity() - self.nhigh + int(self.meta[M_FREETOP])
        if avail >= k:
            return
        cap = self.capacity()
        new = max(2 * cap, cap + k)
        pad = new - cap
        self.feat = np.concatenate([self.feat, np.full(pad, FEAT_FREE, np.int32)])
        self.thr = np.concatenate([self.thr, np.zeros(pad)])
        self.missl = np.concatenate([self.missl, np.zeros(pad, np.uint8)])
        self.left = np.concatenate([self.left, np.full(pad, -1, np.int32)])
        self.right = np.concatenate([self.right, np.full(pad, -1, np.int32)])
        self.depth = np.concatenate([self.depth, np.zeros(pad, np.int32)])
        self.leafval = np.concatenate([self.leafval, np.zeros(pad)])
        self.free = np.concatenate([self.free, np.zeros(pad, np.int32)])

    def copy(self) -> "Tree":
        t = Tree.__new__(Tree)
        for name in ("feat", "thr", "missl", "left", "right", "depth",
                     "leafval", "free", "meta"):
            setattr(t, name, getattr(self, name).copy())
        t.pre_cache = None
        return t

    # -- canonical serialization ------------------------------------------

    def compact(self) -> dict:
        """Preorder arrays with local child indices, for stacked prediction.

        The structural part is cached (the sweep driver clears ``pre_cache``
        whenever a structural move is accepted); leaf values are gathered
        fresh on every call since they change every sweep.
        """
        if self.pre_cache is None:
            order = np.asarray(self.subtree_slots(0), dtype=np.int32)
            pos = np.empty(self.capacity(), dtype=np.int32)
            pos[order] = np.arange(len(order), dtype=np.int32)
            feat = self.feat[order].copy()
            internal = feat >= 0
            left = np.where(internal, pos[self.left[order]], -1).astype(np.int32)
            right = np.where(internal, pos[self.right[order]], -1).astype(np.int32)
            self.pre_cache = (order, feat, self.thr[order].copy(),
                              self.missl[order].copy(), left, right)
        order, feat, thr, missl, left, right = self.pre_cache
        return {"feat": feat, "thr": thr, "missl": missl, "left": left,
                "right": right, "leafval": self.leafval[order].copy()}

    def to_records(self) -> list:
        """Preorder node records: [1, feat, thr, missing_left] / [0, value]."""
        out = []

        def rec(s: int) -> None:
            if self.feat[s] >= 0:
                out.append([1, int(self.feat[s]), float(self.thr[s]),
                            int(self.missl[s])])
                rec(int(self.left[s]))
                rec(int(self.right[s]))
            else:
                out.append([0, float(self.leafval[s])])

        rec(0)
        return out

    @classmethod
    def from_records(cls, records: list) -> "Tree":
        t = cls(cap=max(8, len(records)))
        pos = 0

        def build(depth: int) -> int:
            nonlocal pos
            rec = records[pos]
            s = pos
            pos += 1
            t.depth[s] = depth
            if rec[0] == 1:
                t.feat[s] = rec[1]
                t.thr[s] = rec[2]
                t.missl[s] = rec[3]
                t.left[s] = build(depth + 1)
                t.right[s] = build(depth + 1)
                t.meta[M_NINT] += 1
            else:
                t.feat[s] = FEAT_LEAF
                t.leafval[s] = rec[1]
                t.meta[M_NLEAF] += 1
            return s

        build(0)
        t.meta[M_NHIGH] = len(records)
        return t


def route_one(tree: Tree, x: np.ndarray) -> int:
    """Leaf slot for a single row (NaN = missing)."""
    s = 0
    while tree.feat[s] >= 0:
        v = x[tree.feat[s]]
        if math.isnan(v):
            go_left = bool(tree.missl[s])
        else:
            go_left = v <= tree.thr[s]
        s = int(tree.left[s]) if go_left else int(tree.right[s])
    return s


def traverse(tree: Tree, X: np.ndarray) -> np.ndarray:
    """Leaf slot per row of X. Every row lands in exactly one leaf."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty(len(X), dtype=np.int32)
    for i in range(len(X)):
        out[i] = route_one(tree, X[i])
    return out


# -- prior and likelihood --------------------------------------------------

def split_prob(depth: int, alpha: float, beta: float) -> float:
    return alpha * (1.0 + depth) ** (-beta)


def log_tree_prior(tree: Tree, alpha: float, beta: float) -> float:
    """Log prior probability of the tree's branching structure.

    Internal nodes at depth d contribute log(alpha*(1+d)^-beta), leaves
    log(1 - alpha*(1+d)^-beta). Split-rule choices are uniform and cancel in
    the MH ratios, so they are not part of this quantity.
    """
    total = 0.0
    for s in tree.active_slots():
        p = split_prob(int(tree.depth[s]), alpha, beta)
        total += math.log(p) if tree.feat[s] >= 0 else math.log1p(-p)
    return total


def leaf_loglik(n, s, sigma2: float, leaf_var: float):
    """Leaf marginal log likelihood up to the partition-free -sum(r^2)/(2 sigma2).

    Computed from the sufficient statistics alone: n may be a (possibly
    weighted) count and s the matching residual sum. The dropped term depends
    only on the pooled residuals, never on how a tree partitions them, so MH
    comparisons between structures can use this form directly. n == 0 (and
    hence s == 0) gives exactly 0, so empty leaves are harmless.
    """
    n = np.asarray(n, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    t = sigma2 + n * leaf_var
    return (-0.5 * n * np.log(2.0 * np.pi * sigma2)
            + 0.5 * np.log(sigma2 / t)
            + leaf_var * s * s / (2.0 * sigma2 * t))


def log_marginal_likelihood(partition, sigma2: float, leaf_var: float) -> float:
    """Exact log of the leaf-mean-integrated likelihood over a leaf partition.

    ``partition`` is a sequence of per-leaf residual arrays. Non-finite
    residuals are rejected; empty leaves contribute 0. Unlike the
    sufficient-statistic form in ``leaf_loglik``, this includes the
    -sum(r^2)/(2 sigma2) term, so each leaf equals the actual integral
    of prod N(r_i | m, sigma2) N(m | 0, leaf_var) dm.
    """
    if sigma2 <= 0 or leaf_var <= 0:
        raise ValueError("sigma2 and leaf_var must be positive")
    total = 0.0
    for r in partition:
        r = np.asarray(r, dtype=np.float64)
        if r.size and not np.isfinite(r).all():
            raise ValueError("residuals must be finite")
        total += float(leaf_loglik(r.size, r.sum(), sigma2, leaf_var))
        total -= float(r @ r) / (2.0 * sigma2)
    return total


def leaf_posterior(n, s, sigma2: float, leaf_var: float):
    """Posterior (mean, var) of a leaf value given count n and residual sum s.

    n == 0 returns the prior (0, leaf_var); one unified formula.
    """
    n = np.asarray(n, dtype=np.float64)
    v = 1.0 / (1.0 / leaf_var + n / sigma2)
    m = v * (np.asarray(s, dtype=np.float64) / sigma2)
    return m, v


def sample_leaf_values(tree: Tree, partition, sigma2: float, leaf_var: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Draw every leaf value from its conjugate normal posterior, in place.

    ``partition`` maps each leaf (ascending slot order) to its residual array;
    leaves with no data draw from the prior.
    """
    slots = tree.leaf_slots()
    if len(partition) != len(slots):
        raise ValueError("partition/leaf count mismatch")
    z = rng.standard_normal(len(slots))
    for j, s in enumerate(slots):
        r = np.asarray(partition[j], dtype=np.float64)
        m, v = leaf_posterior(r.size, r.sum(), sigma2, leaf_var)
        tree.leafval[s] = m + math.sqrt(v) * z[j]
    return tree.leafval[slots].copy()


# -- structural mutations (O(1), undoable) ----------------------------------

def grow_at(tree: Tree, leaf: int, f: int, cut: float, missl: int) -> tuple:
    """Split a leaf; returns an undo record. Caller guarantees free slots."""
    if tree.meta[M_FREETOP] > 0:
        tree.meta[M_FREETOP] -= 1
        l = int(tree.free[tree.meta[M_FREETOP]])
    else:
        l = tree.nhigh
        tree.meta[M_NHIGH] += 1
    if tree.meta[M_FREETOP] > 0:
        tree.meta[M_FREETOP] -= 1
        r = int(tree.free[tree.meta[M_FREETOP]])
    else:
        r = tree.nhigh
        tree.meta[M_NHIGH] += 1
    d = int(tree.depth[leaf]) + 1
    for c in (l, r):
        tree.feat[c] = FEAT_LEAF
        tree.depth[c] = d
        tree.leafval[c] = 0.0
    tree.feat[leaf] = f
    tree.thr[leaf] = cut
    tree.missl[leaf] = missl
    tree.left[leaf] = l
    tree.right[leaf] = r
    tree.meta[M_NLEAF] += 1
    tree.meta[M_NINT] += 1
    return (leaf, l, r)


def undo_grow(tree: Tree, rec: tuple) -> None:
    prune_at(tree, rec[0])


def prune_at(tree: Tree, node: int) -> tuple:
    """Collapse a prunable internal node back to a leaf; returns undo record."""
    l, r = int(tree.left[node]), int(tree.right[node])
    rec = (node, int(tree.feat[node]), float(tree.thr[node]),
           int(tree.missl[node]), l, r)
    for c in (l, r):
        tree.feat[c] = FEAT_FREE
        tree.free[tree.meta[M_FREETOP]] = c
        tree.meta[M_FREETOP] += 1
    tree.feat[node] = FEAT_LEAF
    tree.leafval[node] = 0.0
    tree.meta[M_NLEAF] -= 1
    tree.meta[M_NINT] -= 1
    return rec


def undo_prune(tree: Tree, rec: tuple) -> None:
    node, f, thr, missl, l, r = rec
    # the two freed slots are on top of the free stack, in push order (l, r)
    tree.meta[M_FREETOP] -= 2
    d = int(tree.depth[node]) + 1
    for c in (l, r):
        tree.feat[c] = FEAT_LEAF
        tree.depth[c] = d
        tree.leafval[c] = 0.0
    tree.feat[node] = f
    tree.thr[node] = thr
    tree.missl[node] = missl
    tree.left[node] = l
    tree.right[node] = r
    tree.meta[M_NLEAF] += 1
    tree.meta[M_NINT] += 1


def set_rule(tree: Tree, node: int, f: int, cut: float, missl: int) -> tuple:
    rec = (node, int(tree.feat[node]), float(tree.thr[node]), int(tree.missl[node]))
    tree.feat[node] = f
    tree.thr[node] = cut
    tree.missl[node] = missl
    return rec


def undo_set_rule(tree: Tree, rec: tuple) -> None:
    node, f, thr, missl = rec
    tree.feat[node] = f
    tree.thr[node] = thr
    tree.missl[node] = missl


def swap_rules(tree: Tree, parent: int, child: int) -> tuple:
    rec = (parent, child)
    for a in (tree.feat, tree.thr, tree.missl):
        a[parent], a[child] = a[child], a[parent]
    return rec


undo_swap = lambda tree, rec: swap_rules(tree, *rec)  # swapping back undoes it


# -- proposal machinery ------------------------------------------------------

@dataclass
class MoveProbs:
    grow: float = 0.25
    prune: float = 0.25
    change: float = 0.40
    swap: float = 0.10


@dataclass
class Proposal:
    """Outcome of one structural proposal.

    ``valid`` is False for auto-rejected proposals (no legal candidate, a
    min-leaf violation, or a reverse move with zero density); those consume
    the same uniforms but skip the MH test. When valid, the tree has already
    been mutated to the candidate state and ``undo()`` restores the original.
    """
    move: int
    valid: bool
    log_q_ratio: float = 0.0
    undo_fn: object = None
    info: dict = field(default_factory=dict)

    def undo(self, tree: Tree) -> None:
        if self.undo_fn is not None:
            self.undo_fn(tree)


def node_distinct_values(X: np.ndarray, rows: np.ndarray, f: int) -> np.ndarray:
    """Sorted distinct observed values of feature f among the given rows."""
    v = X[rows, f]
    v = v[~np.isnan(v)]
    return np.unique(v)


def _pick(u: float, k: int) -> int:
    """Uniform index in [0, k) from one uniform draw."""
    i = int(u * k)
    return k - 1 if i >= k else i


def propose_move(tree: Tree, X: np.ndarray, u: np.ndarray, *,
                 min_leaf: int = 5, probs: MoveProbs = MoveProbs(),
                 slots: np.ndarray | None = None,
                 force: int | None = None) -> Proposal:
    """Draw one GROW/PRUNE/CHANGE/SWAP proposal and apply it to the tree.

    ``u`` supplies exactly six uniforms: move choice, node choice, feature,
    cut, missing direction, MH accept. All six are consumed regardless of the
    move so RNG streams stay aligned across backends. ``slots`` is the
    current leaf assignment of X's rows (routed afresh when omitted).
    The returned log_q_ratio is log q(T|T') - log q(T'|T); the tree prior and
    marginal likelihood parts of the MH ratio are the caller's business.
    """
    X = np.asarray(X, dtype=np.float64)
    n_rows, P = X.shape
    if slots is None:
        slots = traverse(tree, X)

    if force is not None:
        move = force
    elif u[0] < probs.grow:
        move = GROW
    elif u[0] < probs.grow + probs.prune:
        move = PRUNE
    elif u[0] < probs.grow + probs.prune + probs.change:
        move = CHANGE
    else:
        move = SWAP

    if move == GROW:
        return _propose_grow(tree, X, u, min_leaf, probs, slots)
    if move == PRUNE:
        return _propose_prune(tree, X, u, min_leaf, probs, slots)
    if move == CHANGE:
        return _propose_change(tree, X, u, min_leaf, slots)
    return _propose_swap(tree, X, u, min_leaf, slots)


def _leaf_row_counts(tree: Tree, slots: np.ndarray) -> np.ndarray:
    return np.bincount(slots, minlength=tree.capacity())


def _min_leaf_ok(tree: Tree, slots: np.ndarray, min_leaf: int) -> bool:
    """Every active leaf must hold at least min_leaf design rows."""
    counts = _leaf_row_counts(tree, slots)
    return all(counts[s] >= min_leaf for s in tree.leaf_slots())


def _propose_grow(tree, X, u, min_leaf, probs, slots) -> Proposal:
    leaves = tree.leaf_slots()
    n_leaf = len(leaves)
    leaf = int(leaves[_pick(u[1], n_leaf)])
    P = X.shape[1]
    f = _pick(u[2], P)
    rows = np.nonzero(slots == leaf)[0]
    vals = node_distinct_values(X, rows, f)
    n_cut = len(vals) - 1
    if n_cut < 1:
        return Proposal(GROW, False, info={"reason": "no cutpoints"})
    cut = float(vals[_pick(u[3], n_cut)])
    missl = 1 if u[4] < 0.5 else 0
    # check the min-leaf guard before mutating so slot allocation state is
    # untouched by impossible proposals (the compiled backend does the same)
    v = X[rows, f]
    nan = np.isnan(v)
    goleft = np.where(nan, bool(missl), v <= cut)
    n_l = int(np.count_nonzero(goleft))
    if min(n_l, len(rows) - n_l) < min_leaf:
        return Proposal(GROW, False, info={"reason": "min_leaf"})
    tree.ensure_free(2)
    rec = grow_at(tree, leaf, f, cut, missl)
    n_prun_new = len(tree.prunable_slots())
    # rule choices (feature, cut, missing side) are proposed from the rule
    # prior, so those densities cancel in the Hastings ratio
    log_q = (math.log(probs.prune) - math.log(n_prun_new)
             - math.log(probs.grow) + math.log(n_leaf))
    return Proposal(GROW, True, log_q, lambda t, rec=rec: undo_grow(t, rec),
                    info={"leaf": leaf, "feature": f, "cut": cut,
                          "missl": missl, "rows": rows, "goleft": goleft})


def _propose_prune(tree, X, u, min_leaf, probs, slots) -> Proposal:
    prunable = tree.prunable_slots()
    if len(prunable) == 0:
        return Proposal(PRUNE, False, info={"reason": "no prunable"})
    node = int(prunable[_pick(u[1], len(prunable))])
    f_old, cut_old = int(tree.feat[node]), float(tree.thr[node])
    l, r = int(tree.left[node]), int(tree.right[node])
    rows = np.nonzero((slots == l) | (slots == r))[0]
    rec = prune_at(tree, node)
    # reverse move: a GROW at this leaf must be able to re-propose the old rule
    vals = node_distinct_values(X, rows, f_old)
    n_cut = len(vals) - 1
    if n_cut < 1 or not np.any(vals[:n_cut] == cut_old):
        undo_prune(tree, rec)
        return Proposal(PRUNE, False, info={"reason": "irreversible"})
    n_leaf_new = tree.n_leaves
    log_q = (math.log(probs.grow) - math.log(n_leaf_new)
             - math.log(probs.prune) + math.log(len(prunable)))
    return Proposal(PRUNE, True, log_q, lambda t, rec=rec: undo_prune(t, rec),
                    info={"node": node, "left": l, "right": r})


def _propose_change(tree, X, u, min_leaf, slots) -> Proposal:
    internal = tree.internal_slots()
    if len(internal) == 0:
        return Proposal(CHANGE, False, info={"reason": "no internal"})
    node = int(internal[_pick(u[1], len(internal))])
    P = X.shape[1]
    f_new = _pick(u[2], P)
    desc = tree.leaf_descendants(node)
    member = np.isin(slots, desc)
    rows = np.nonzero(member)[0]
    f_old, cut_old = int(tree.feat[node]), float(tree.thr[node])
    vals_new = node_distinct_values(X, rows, f_new)
    n_cut_new = len(vals_new) - 1
    if n_cut_new < 1:
        return Proposal(CHANGE, False, info={"reason": "no cutpoints"})
    vals_old = node_distinct_values(X, rows, f_old)
    n_cut_old = len(vals_old) - 1
    if n_cut_old < 1 or not np.any(vals_old[:n_cut_old] == cut_old):
        return Proposal(CHANGE, False, info={"reason": "irreversible"})
    cut = float(vals_new[_pick(u[3], n_cut_new)])
    missl = 1 if u[4] < 0.5 else 0
    rec = set_rule(tree, node, f_new, cut, missl)
    slots_new = traverse(tree, X)
    if not _min_leaf_ok(tree, slots_new, min_leaf):
        undo_set_rule(tree, rec)
        return Proposal(CHANGE, False, info={"reason": "min_leaf"})
    # the redrawn rule comes from the rule prior and the old rule's prior
    # mass equals its reverse-proposal density, so everything cancels
    return Proposal(CHANGE, True, 0.0, lambda t, rec=rec: undo_set_rule(t, rec),
                    info={"node": node, "feature": f_new, "cut": cut,
                          "slots_new": slots_new})


def _propose_swap(tree, X, u, min_leaf, slots) -> Proposal:
    pairs = tree.swap_pairs()
    if not pairs:
        return Proposal(SWAP, False, info={"reason": "no swappable"})
    parent, child = pairs[_pick(u[1], len(pairs))]
    rec = swap_rules(tree, parent, child)
    slots_new = traverse(tree, X)
    if not _min_leaf_ok(tree, slots_new, min_leaf):
        undo_swap(tree, rec)
        return Proposal(SWAP, False, info={"reason": "min_leaf"})
    return Proposal(SWAP, True, 0.0, lambda t, rec=rec: undo_swap(t, rec),
                    info={"parent": parent, "child": child,
                          "slots_new": slots_new})
