"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pandas as pd
import pytest

from lbcf import trees
from lbcf.data import from_frame


def make_panel_frame(n=40, T=3, seed=0, missing_z=0, dropout=0):
    """Small synthetic wide-format panel with optional missing cells."""
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal(n)
    x2 = rng.standard_normal(n)
    y = np.cumsum(rng.standard_normal((n, T)) + 1.0, axis=1) + x1[:, None]
    z = (rng.random((n, T - 1)) < 0.5).astype(float)
    cols = {"id": np.arange(n)}
    for t in range(T):
        cols[f"y.{t + 1}"] = y[:, t].copy()
    for w in range(2, T + 1):
        cols[f"z.{w}"] = z[:, w - 2].copy()
    cols["x.a.1"] = x1
    cols["x.b.2"] = x2
    df = pd.DataFrame(cols)
    if missing_z:
        rows = rng.choice(n, size=missing_z, replace=False)
        df.loc[rows, f"z.{T}"] = np.nan
    if dropout:
        rows = rng.choice(n, size=dropout, replace=False)
        df.loc[rows, f"y.{T}"] = np.nan
    return df


@pytest.fixture
def small_panel():
    return from_frame(make_panel_frame())


def grow_random_tree(rng, X, n_grows=4, min_leaf=1):
    """Grow a tree by repeated random GROW proposals; returns the tree."""
    tree = trees.Tree.stump()
    attempts = 0
    while tree.n_internal < n_grows and attempts < n_grows * 20:
        attempts += 1
        u = rng.random(6)
        trees.propose_move(tree, X, u, min_leaf=min_leaf, force=trees.GROW)
    return tree


def tree_records_equal(a, b):
    return a.to_records() == b.to_records()
