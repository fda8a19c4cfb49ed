"""Pure-NumPy sampling kernels.

Reference implementation of the hot operations; the compiled backend in
``_kernels_c.pyx`` mirrors this module statement for statement. Both consume
identical pre-drawn randomness (six uniforms plus ``n_leaves + 1`` standard
normals per tree update), and every floating-point expression is written with
the same association order, so chains agree bitwise across backends.
"""

from __future__ import annotations

import math

import numpy as np

from . import trees
from .trees import GROW, PRUNE, CHANGE, SWAP, M_ACCEPT, M_MOVE, M_VALID, Tree

BACKEND = "python"


def route(tree: Tree, X: np.ndarray) -> np.ndarray:
    """Leaf slot per row; NaN follows the split's missing direction."""
    return trees.traverse(tree, X)


def forest_predict(offs, feat, thr, missl, left, right, leafval, X) -> np.ndarray:
    """Sum of leaf values over a stacked forest, per row of X.

    Trees are accumulated in index order so the result is bit-identical to
    summing per-tree contributions sequentially.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    out = np.zeros(n, dtype=np.float64)
    for t in range(len(offs) - 1):
        root = int(offs[t])
        for i in range(n):
            s = root
            while feat[s] >= 0:
                v = X[i, feat[s]]
                if math.isnan(v):
                    go_left = bool(missl[s])
                else:
                    go_left = v <= thr[s]
                s = int(left[s]) if go_left else int(right[s])
            out[i] += leafval[s]
    return out


def _log_ml_total(tree: Tree, n_by_slot, s_by_slot, sigma2: float,
                  leaf_var: float) -> float:
    """Marginal log likelihood summed over active leaves, ascending slot order."""
    lc = math.log(2.0 * math.pi * sigma2)
    total = 0.0
    for s in tree.leaf_slots():
        n = float(n_by_slot[s])
        sm = float(s_by_slot[s])
        t = sigma2 + n * leaf_var
        total += (-0.5 * n * lc + 0.5 * math.log(sigma2 / t)
                  + leaf_var * sm * sm / (2.0 * sigma2 * t))
    return total


def _grow_prior_delta(depth: int, alpha: float, beta: float) -> float:
    pd = alpha * (1.0 + depth) ** (-beta)
    pd1 = alpha * (2.0 + depth) ** (-beta)
    return math.log(pd) + 2.0 * math.log1p(-pd1) - math.log1p(-pd)


def update_tree(tree: Tree, X, c, r, obs_idx, obs_row, g, slots,
                sigma2: float, leaf_var: float, alpha: float, beta: float,
                min_leaf: int, probs: trees.MoveProbs,
                u: np.ndarray, normals: np.ndarray, ws=None) -> None:
    """One full Metropolis-within-Gibbs update of a single tree.

    Proposes a structural move on the partial residuals, accepts or rejects,
    then redraws every leaf value from its conjugate posterior and folds the
    changed fit back into the global residual vector ``r`` (in place, via this
    block's observation maps). ``c`` holds per-row likelihood observation
    counts (0 rows are routed but carry no likelihood), ``g`` this tree's
    cached per-row contribution, ``slots`` its cached leaf assignment.
    """
    n_rows = X.shape[0]
    cap = tree.capacity()

    # per-row partial residual sums: subject's residual total plus this
    # tree's own contribution added back
    s_subj = np.bincount(obs_row, weights=r[obs_idx], minlength=n_rows)
    s_part = s_subj + c * g

    n_cur = np.bincount(slots, weights=c, minlength=cap)
    s_cur = np.bincount(slots, weights=s_part, minlength=cap)
    ml_cur = _log_ml_total(tree, n_cur, s_cur, sigma2, leaf_var)

    prop = trees.propose_move(tree, X, u, min_leaf=min_leaf, probs=probs,
                              slots=slots)
    tree.meta[M_MOVE] = prop.move
    tree.meta[M_VALID] = int(prop.valid)
    accepted = False

    if prop.valid:
        slots_prop = _proposal_slots(tree, X, slots, prop)
        cap2 = tree.capacity()
        n_prop = np.bincount(slots_prop, weights=c, minlength=cap2)
        s_prop = np.bincount(slots_prop, weights=s_part, minlength=cap2)
        ml_prop = _log_ml_total(tree, n_prop, s_prop, sigma2, leaf_var)

        if prop.move == GROW:
            dprior = _grow_prior_delta(int(tree.depth[prop.info["leaf"]]),
                                       alpha, beta)
        elif prop.move == PRUNE:
            dprior = -_grow_prior_delta(int(tree.depth[prop.info["node"]]),
                                        alpha, beta)
        else:
            dprior = 0.0

        log_ratio = dprior + (ml_prop - ml_cur) + prop.log_q_ratio
        if math.log(u[5]) < log_ratio:
            accepted = True
            slots[:] = slots_prop
            n_fin, s_fin = n_prop, s_prop
            tree.pre_cache = None
        else:
            prop.undo(tree)
            n_fin, s_fin = n_cur, s_cur
    else:
        n_fin, s_fin = n_cur, s_cur

    tree.meta[M_ACCEPT] = int(accepted)

    # redraw every leaf value from its conjugate posterior (prior when the
    # leaf carries no likelihood observations)
    leaf_slots = tree.leaf_slots()
    for j, s in enumerate(leaf_slots):
        n = float(n_fin[s])
        v = 1.0 / (1.0 / leaf_var + n / sigma2)
        m = v * (float(s_fin[s]) / sigma2)
        tree.leafval[s] = m + math.sqrt(v) * normals[j]

    g_new = tree.leafval[slots]
    delta = g_new - g
    r[obs_idx] -= delta[obs_row]
    g[:] = g_new


def _proposal_slots(tree: Tree, X, slots, prop) -> np.ndarray:
    """Leaf assignment under the (already applied) candidate tree."""
    info = prop.info
    if prop.move == GROW:
        out = slots.copy()
        leaf = info["leaf"]
        rows = np.nonzero(slots == leaf)[0]
        v = X[rows, info["feature"]]
        goleft = np.where(np.isnan(v), bool(info["missl"]), v <= info["cut"])
        out[rows[goleft]] = tree.left[leaf]
        out[rows[~goleft]] = tree.right[leaf]
        return out
    if prop.move == PRUNE:
        node, l, r_ = info["node"], info["left"], info["right"]
        out = slots.copy()
        out[(slots == l) | (slots == r_)] = node
        return out
    return info["slots_new"]
