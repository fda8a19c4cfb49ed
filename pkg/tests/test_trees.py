"""Tree kernel: routing, priors, marginal likelihood, proposals, mutation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from conftest import grow_random_tree, tree_records_equal
from lbcf import trees
from lbcf.trees import (CHANGE, GROW, PRUNE, SWAP, MoveProbs, Tree,
                        grow_at, leaf_posterior, log_marginal_likelihood,
                        log_tree_prior, node_distinct_values, propose_move,
                        prune_at, sample_leaf_values, set_rule, split_prob,
                        swap_rules, traverse, undo_grow, undo_prune,
                        undo_set_rule, undo_swap)


def one_split_tree(cut=0.5, missl=1, feature=0):
    tree = Tree.stump()
    grow_at(tree, 0, feature, cut, missl)
    return tree


# -- routing -----------------------------------------------------------------

def test_traverse_left_on_le():
    tree = one_split_tree(cut=0.5, missl=1)
    assert traverse(tree, [[0.3]])[0] == tree.left[0]


def test_traverse_missing_follows_direction():
    tree = one_split_tree(cut=0.5, missl=1)
    assert traverse(tree, [[np.nan]])[0] == tree.left[0]
    tree_r = one_split_tree(cut=0.5, missl=0)
    assert traverse(tree_r, [[np.nan]])[0] == tree_r.right[0]


def test_traverse_right_on_gt():
    tree = one_split_tree(cut=0.5, missl=1)
    assert traverse(tree, [[0.7]])[0] == tree.right[0]


def test_traverse_boundary_goes_left():
    tree = one_split_tree(cut=0.5)
    assert traverse(tree, [[0.5]])[0] == tree.left[0]


def test_traverse_out_of_range_feature_errors():
    tree = one_split_tree()
    tree.feat[0] = 7  # corrupt the rule past the design width
    with pytest.raises(IndexError):
        traverse(tree, np.zeros((1, 3)))


@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 12))
@settings(max_examples=40, deadline=None)
def test_traverse_partition_disjoint_exhaustive(seed, n_grows):
    """Every row lands in exactly one active leaf, NaNs included."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((60, 3))
    X[rng.random((60, 3)) < 0.2] = np.nan
    tree = grow_random_tree(rng, X, n_grows=n_grows)
    slots = traverse(tree, X)
    leaves = set(tree.leaf_slots().tolist())
    assert set(slots.tolist()) <= leaves
    sizes = {s: int((slots == s).sum()) for s in leaves}
    assert sum(sizes.values()) == len(X)


# -- structure prior -----------------------------------------------------------

def test_stump_prior_default_alphas():
    stump = Tree.stump()
    assert log_tree_prior(stump, 0.95, 2.0) == pytest.approx(
        math.log(0.05), abs=1e-12)
    assert log_tree_prior(stump, 0.95, 2.0) == pytest.approx(-2.9957, abs=5e-5)
    assert log_tree_prior(stump, 0.25, 3.0) == pytest.approx(
        math.log(0.75), abs=1e-12)
    assert log_tree_prior(stump, 0.25, 3.0) == pytest.approx(-0.2877, abs=5e-5)


def test_root_split_prior_value():
    tree = one_split_tree()
    # log(0.95) + 2 log(1 - 0.95/4), frozen from hand evaluation
    assert log_tree_prior(tree, 0.95, 2.0) == pytest.approx(-0.593599, abs=1e-6)


@given(st.floats(0.01, 0.99), st.floats(0.0, 6.0))
@settings(max_examples=60, deadline=None)
def test_stump_prior_is_one_minus_alpha(alpha, beta):
    assert math.exp(log_tree_prior(Tree.stump(), alpha, beta)) == pytest.approx(
        1.0 - alpha, rel=1e-12)


def test_split_prob_decreases_with_depth():
    probs = [split_prob(d, 0.95, 2.0) for d in range(5)]
    assert all(a > b for a, b in zip(probs, probs[1:]))


def test_deep_tree_prior_matches_direct_product():
    rng = np.random.default_rng(5)
    X = rng.random((80, 4))
    tree = grow_random_tree(rng, X, n_grows=6)
    expect = 0.0
    for s in tree.active_slots():
        p = split_prob(int(tree.depth[s]), 0.8, 1.5)
        expect += math.log(p) if tree.feat[s] >= 0 else math.log1p(-p)
    assert log_tree_prior(tree, 0.8, 1.5) == pytest.approx(expect, rel=1e-12)


# -- marginal likelihood ---------------------------------------------------------

def test_ml_empty_partition_is_zero():
    assert log_marginal_likelihood([], 1.0, 1.0) == 0.0
    assert log_marginal_likelihood([np.array([])], 1.0, 1.0) == 0.0


def test_ml_single_zero_residual():
    # one point at 0: log N(0 | 0, sigma2 + leaf_var) = -log(4 pi)/2
    got = log_marginal_likelihood([np.array([0.0])], 1.0, 1.0)
    assert got == pytest.approx(-0.5 * math.log(4 * math.pi), abs=1e-9)
    assert got == pytest.approx(-1.26551, abs=5e-6)


def test_ml_single_unit_residual():
    got = log_marginal_likelihood([np.array([1.0])], 1.0, 1.0)
    assert got == pytest.approx(-0.5 * math.log(4 * math.pi) - 0.25, abs=1e-9)
    assert got == pytest.approx(-1.51551, abs=5e-6)


def test_ml_validates_inputs():
    with pytest.raises(ValueError):
        log_marginal_likelihood([np.array([0.0])], 0.0, 1.0)
    with pytest.raises(ValueError):
        log_marginal_likelihood([np.array([0.0])], 1.0, -1.0)
    with pytest.raises(ValueError):
        log_marginal_likelihood([np.array([np.inf])], 1.0, 1.0)


def _quad_leaf_oracle(r, sigma2, leaf_var):
    """Numerical integration of the leaf marginal over the leaf mean."""
    r = np.asarray(r, dtype=np.float64)

    def integrand(m):
        return math.exp(stats.norm.logpdf(r, loc=m,
                                          scale=math.sqrt(sigma2)).sum()
                        + stats.norm.logpdf(m, 0.0, math.sqrt(leaf_var)))

    center = r.sum() * leaf_var / (sigma2 + len(r) * leaf_var)
    half = 12.0 * math.sqrt(leaf_var)
    val, _ = integrate.quad(integrand, center - half, center + half,
                            limit=200, epsabs=1e-14, epsrel=1e-12)
    return math.log(val)


def test_ml_matches_quadrature_on_random_small_leaves():
    rng = np.random.default_rng(42)
    for _ in range(50):
        n = int(rng.integers(1, 6))
        r = rng.standard_normal(n) * rng.uniform(0.3, 2.0)
        sigma2 = float(rng.uniform(0.1, 4.0))
        leaf_var = float(rng.uniform(0.05, 2.0))
        got = log_marginal_likelihood([r], sigma2, leaf_var)
        assert got == pytest.approx(_quad_leaf_oracle(r, sigma2, leaf_var),
                                    abs=1e-6)


def test_ml_matches_compound_symmetry_gaussian():
    """The leaf marginal equals an MVN with covariance sigma2 I + lv J."""
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(1, 6))
        r = rng.standard_normal(n) * 1.5
        sigma2, lv = float(rng.uniform(0.2, 3.0)), float(rng.uniform(0.1, 1.5))
        cov = sigma2 * np.eye(n) + lv * np.ones((n, n))
        want = stats.multivariate_normal.logpdf(r, mean=np.zeros(n), cov=cov)
        assert log_marginal_likelihood([r], sigma2, lv) == pytest.approx(
            want, abs=1e-9)


def test_ml_sums_over_leaves():
    rng = np.random.default_rng(3)
    parts = [rng.standard_normal(3), np.array([]), rng.standard_normal(2)]
    total = log_marginal_likelihood(parts, 0.7, 0.4)
    by_leaf = sum(log_marginal_likelihood([p], 0.7, 0.4) for p in parts)
    assert total == pytest.approx(by_leaf, rel=1e-12)


# -- conjugate leaf draws ------------------------------------------------------

def test_leaf_posterior_example():
    m, v = leaf_posterior(4, 2.0, 1.0, 1.0)
    assert float(m) == pytest.approx(0.4, abs=1e-12)
    assert float(v) == pytest.approx(0.2, abs=1e-12)


def test_leaf_posterior_no_data_is_prior():
    m, v = leaf_posterior(0, 0.0, 1.0, 0.3)
    assert float(m) == 0.0
    assert float(v) == pytest.approx(0.3, rel=1e-12)


def test_sample_leaf_values_moments():
    """10^5 conjugate draws match N(0.4, 0.2) within 3 MC standard errors."""
    rng = np.random.default_rng(11)
    tree = Tree.stump()
    r = np.full(4, 0.5)  # n = 4, sum = 2
    draws = np.empty(100_000)
    for i in range(draws.size):
        draws[i] = sample_leaf_values(tree, [r], 1.0, 1.0, rng)[0]
    m, v = 0.4, 0.2
    se_mean = math.sqrt(v / draws.size)
    assert abs(draws.mean() - m) < 3 * se_mean
    se_var = v * math.sqrt(2.0 / (draws.size - 1))
    assert abs(draws.var(ddof=1) - v) < 3 * se_var


def test_sample_leaf_values_empty_leaf_prior_moments():
    rng = np.random.default_rng(12)
    tree = Tree.stump()
    lv = 0.4
    draws = np.empty(100_000)
    for i in range(draws.size):
        draws[i] = sample_leaf_values(tree, [np.array([])], 2.0, lv, rng)[0]
    assert abs(draws.mean()) < 3 * math.sqrt(lv / draws.size)
    assert abs(draws.var(ddof=1) - lv) < 3 * lv * math.sqrt(2 / draws.size)


def test_sample_leaf_values_partition_count_mismatch():
    tree = one_split_tree()
    with pytest.raises(ValueError):
        sample_leaf_values(tree, [np.array([0.0])], 1.0, 1.0,
                           np.random.default_rng(0))


def test_sample_leaf_values_concentrates_on_mean():
    # prior washes out as n grows
    rng = np.random.default_rng(13)
    tree = Tree.stump()
    r = np.full(200_000, 1.7)
    vals = [sample_leaf_values(tree, [r], 1.0, 1.0, rng)[0]
            for _ in range(50)]
    assert np.mean(vals) == pytest.approx(1.7, abs=0.01)


# -- mutations and undo ---------------------------------------------------------

def test_grow_prune_roundtrip_identical():
    rng = np.random.default_rng(21)
    X = rng.random((50, 3))
    tree = grow_random_tree(rng, X, n_grows=3)
    tree.ensure_free(2)
    before = tree.to_records()
    leaf = int(tree.leaf_slots()[0])
    rec = grow_at(tree, leaf, 1, 0.37, 0)
    undo_grow(tree, rec)
    assert tree.to_records() == before

    node = int(tree.prunable_slots()[0])
    rec = prune_at(tree, node)
    undo_prune(tree, rec)
    assert tree.to_records() == before


def test_grow_then_prune_at_same_node_restores_structure():
    tree = one_split_tree(cut=0.3, missl=1)
    before = tree.to_records()
    leaf = int(tree.leaf_slots()[-1])
    grow_at(tree, leaf, 0, 0.8, 0)
    prune_at(tree, leaf)
    assert tree.to_records() == before


def test_set_rule_and_swap_roundtrip():
    rng = np.random.default_rng(22)
    X = rng.random((60, 3))
    tree = grow_random_tree(rng, X, n_grows=4)
    before = tree.to_records()
    node = int(tree.internal_slots()[0])
    rec = set_rule(tree, node, 2, 0.9, 1)
    undo_set_rule(tree, rec)
    assert tree.to_records() == before
    pairs = tree.swap_pairs()
    if pairs:
        parent, child = pairs[0]
        rec = swap_rules(tree, parent, child)
        undo_swap(tree, rec)
        assert tree.to_records() == before


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_proposal_undo_restores_tree(seed):
    """Any applied proposal followed by undo leaves the records unchanged."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((40, 3))
    tree = grow_random_tree(rng, X, n_grows=int(rng.integers(0, 5)))
    before = tree.to_records()
    for _ in range(8):
        prop = propose_move(tree, X, rng.random(6), min_leaf=1)
        if prop.valid:
            prop.undo(tree)
        assert tree.to_records() == before


def test_serialization_roundtrip_bit_exact():
    rng = np.random.default_rng(23)
    X = rng.standard_normal((50, 4))
    X[rng.random((50, 4)) < 0.15] = np.nan
    tree = grow_random_tree(rng, X, n_grows=5)
    rng2 = np.random.default_rng(24)
    sample_leaf_values(tree, [rng2.standard_normal(3)
                              for _ in tree.leaf_slots()], 1.0, 0.5, rng2)
    clone = Tree.from_records(tree.to_records())
    assert tree_records_equal(tree, clone)
    # slot numbering may differ (preorder relabeling); routed values may not
    assert np.array_equal(tree.leafval[traverse(tree, X)],
                          clone.leafval[traverse(clone, X)])


# -- proposals ------------------------------------------------------------------

def test_forced_grow_on_stump_splits():
    X = np.linspace(0, 1, 20).reshape(-1, 1)
    tree = Tree.stump()
    prop = propose_move(tree, X, np.full(6, 0.5), min_leaf=5, force=GROW)
    assert prop.valid and prop.move == GROW
    assert tree.n_leaves == 2 and tree.n_internal == 1


def test_forced_prune_on_split_restores_stump():
    X = np.linspace(0, 1, 20).reshape(-1, 1)
    tree = Tree.stump()
    assert propose_move(tree, X, np.full(6, 0.5), min_leaf=5,
                        force=GROW).valid
    prop = propose_move(tree, X, np.full(6, 0.5), min_leaf=5, force=PRUNE)
    assert prop.valid and prop.move == PRUNE
    assert tree.n_leaves == 1 and tree.n_internal == 0


def test_prune_rejected_when_grow_cannot_repropose_cut():
    # the reverse GROW must be able to draw the removed rule's cut value
    X = np.linspace(0, 1, 20).reshape(-1, 1)
    tree = one_split_tree(cut=0.4)  # 0.4 is not an observed value
    prop = propose_move(tree, X, np.full(6, 0.5), min_leaf=5, force=PRUNE)
    assert not prop.valid
    assert tree.n_leaves == 2


def test_forced_prune_on_stump_is_noop():
    X = np.linspace(0, 1, 20).reshape(-1, 1)
    tree = Tree.stump()
    prop = propose_move(tree, X, np.full(6, 0.5), min_leaf=5, force=PRUNE)
    assert not prop.valid
    assert tree.n_leaves == 1


def test_change_on_stump_and_swap_on_one_split_are_noops():
    X = np.linspace(0, 1, 30).reshape(-1, 1)
    stump = Tree.stump()
    assert not propose_move(stump, X, np.full(6, 0.5), force=CHANGE).valid
    split = one_split_tree(cut=0.4)
    assert not propose_move(split, X, np.full(6, 0.5), force=SWAP).valid


def test_grow_rejected_without_cutpoints():
    X = np.full((20, 1), 3.0)  # constant feature: no legal cut
    tree = Tree.stump()
    prop = propose_move(tree, X, np.full(6, 0.5), min_leaf=1, force=GROW)
    assert not prop.valid


def test_grow_respects_min_leaf():
    # 6 rows, cut at the smallest value puts one row left
    X = np.arange(6, dtype=float).reshape(-1, 1)
    tree = Tree.stump()
    u = np.array([0.0, 0.0, 0.0, 0.0, 0.5, 0.5])  # pick the lowest cut
    prop = propose_move(tree, X, u, min_leaf=5, force=GROW)
    assert not prop.valid
    prop = propose_move(tree, X, u, min_leaf=1, force=GROW)
    assert prop.valid


def test_grow_cut_excludes_node_maximum():
    # splitting at the max would put zero rows right
    X = np.array([[1.0], [1.0], [2.0]])
    tree = Tree.stump()
    for u3 in np.linspace(0.01, 0.99, 17):
        tree2 = Tree.stump()
        u = np.array([0.0, 0.3, 0.3, u3, 0.5, 0.5])
        prop = propose_move(tree2, X, u, min_leaf=1, force=GROW)
        assert prop.valid and prop.info["cut"] == 1.0


def test_grow_prune_log_q_ratios_are_mirrored():
    rng = np.random.default_rng(31)
    X = rng.random((200, 3))
    for trial in range(25):
        tree = grow_random_tree(rng, X, n_grows=int(rng.integers(0, 4)),
                                min_leaf=12)
        for attempt in range(40):
            u = rng.random(6)
            gp = propose_move(tree, X, u, min_leaf=5, force=GROW)
            if gp.valid:
                break
        else:
            continue
        new_node = gp.info["leaf"]
        pr = tree.prunable_slots()
        j = list(pr).index(new_node)
        u2 = np.array([0.0, (j + 0.5) / len(pr), 0.0, 0.0, 0.5, 0.5])
        pp = propose_move(tree, X, u2, min_leaf=5, force=PRUNE)
        assert pp.valid
        assert pp.log_q_ratio == pytest.approx(-gp.log_q_ratio, abs=1e-12)


def test_node_distinct_values_drops_nan():
    X = np.array([[1.0], [np.nan], [2.0], [1.0]])
    vals = node_distinct_values(X, np.arange(4), 0)
    assert vals.tolist() == [1.0, 2.0]


def test_proposal_consumes_fixed_randomness():
    """Valid or not, a proposal reads exactly the six uniforms it is given."""
    X = np.linspace(0, 1, 30).reshape(-1, 1)
    tree = Tree.stump()
    prop = propose_move(tree, X, np.full(6, 0.25), min_leaf=5)
    assert prop.move in (GROW, PRUNE, CHANGE, SWAP)


def test_move_probs_thresholds():
    X = np.linspace(0, 1, 40).reshape(-1, 1)
    probs = MoveProbs()
    cases = [(0.1, GROW), (0.3, PRUNE), (0.6, CHANGE), (0.95, SWAP)]
    for u0, want in cases:
        tree = Tree.stump()
        u = np.array([u0, 0.5, 0.5, 0.5, 0.5, 0.5])
        prop = propose_move(tree, X, u, min_leaf=5, probs=probs)
        assert prop.move == want
