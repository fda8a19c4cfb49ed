"""Shared backfitting machinery: forest blocks and single-forest models.

A ForestBlock owns one forest (a list of trees), its design matrix, and the
observation maps tying block rows to entries of a global residual vector.
The same block type drives the joint longitudinal model, the plain
regression forest used by the differenced-outcome baseline, and the probit
forest used for propensity estimation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .trees import M_ACCEPT, MoveProbs, Tree


@dataclass
class ForestParams:
    n_trees: int
    leaf_var: float
    alpha: float
    beta: float
    min_leaf: int = 5
    probs: MoveProbs = field(default_factory=MoveProbs)


class ForestBlock:
    """One forest with per-row contribution and leaf-assignment caches."""

    def __init__(self, name: str, X: np.ndarray, params: ForestParams,
                 obs_idx: np.ndarray, obs_row: np.ndarray, c: np.ndarray,
                 X_test: np.ndarray | None = None, backend=None):
        self.name = name
        self.params = params
        self.kern = backend if backend is not None else kernels.default_backend()
        # +0.0 normalizes -0.0 so threshold comparisons are backend-identical
        self.X = np.ascontiguousarray(np.asarray(X, dtype=np.float64) + 0.0)
        self.n_rows = self.X.shape[0]
        self.set_obs(obs_idx, obs_row, c)
        self.trees = [Tree.stump() for _ in range(params.n_trees)]
        self.g = np.zeros((params.n_trees, self.n_rows))
        self.slots = np.zeros((params.n_trees, self.n_rows), dtype=np.int32)
        self.ws = kernels.Workspace(self.n_rows, 64)
        self.X_test = None
        self.slots_test = None
        if X_test is not None:
            self.X_test = np.ascontiguousarray(
                np.asarray(X_test, dtype=np.float64) + 0.0)
            self.slots_test = np.zeros(
                (params.n_trees, self.X_test.shape[0]), dtype=np.int32)
        self.n_accepted = 0
        self.n_updates = 0

    def set_obs(self, obs_idx, obs_row, c) -> None:
        """Install likelihood observation maps; c[i] must equal the number of
        map entries for block row i (0 for rows carrying no likelihood)."""
        self.obs_idx = np.ascontiguousarray(obs_idx, dtype=np.int64)
        self.obs_row = np.ascontiguousarray(obs_row, dtype=np.int32)
        self.c = np.ascontiguousarray(c, dtype=np.float64)

    def sweep(self, r: np.ndarray, sigma2: float,
              rng: np.random.Generator) -> None:
        """Update every tree once against the global residual vector r."""
        p = self.params
        for t, tree in enumerate(self.trees):
            tree.ensure_free(2)
            if tree.capacity() > self.ws.cap:
                self.ws.resize(self.n_rows, tree.capacity() * 2)
            u = rng.random(6)
            normals = rng.standard_normal(tree.n_leaves + 1)
            self.kern.update_tree(
                tree, self.X, self.c, r, self.obs_idx, self.obs_row,
                self.g[t], self.slots[t], sigma2, p.leaf_var, p.alpha, p.beta,
                p.min_leaf, p.probs, u, normals, self.ws)
            self.n_updates += 1
            if tree.meta[M_ACCEPT]:
                self.n_accepted += 1
                if self.X_test is not None:
                    self.slots_test[t] = self.kern.route(tree, self.X_test)

    def fit_rows(self) -> np.ndarray:
        """Current per-row fit, trees summed in index order."""
        total = np.zeros(self.n_rows)
        for t in range(self.params.n_trees):
            total += self.g[t]
        return total

    def fit_test_rows(self) -> np.ndarray:
        total = np.zeros(self.X_test.shape[0])
        for t, tree in enumerate(self.trees):
            total += tree.leafval[self.slots_test[t]]
        return total

    def snapshot(self) -> dict:
        """Stacked preorder arrays of the whole forest (child indices global)."""
        parts = [tree.compact() for tree in self.trees]
        sizes = np.array([len(p["feat"]) for p in parts], dtype=np.int32)
        offs = np.zeros(len(parts) + 1, dtype=np.int32)
        np.cumsum(sizes, out=offs[1:])
        out = {"offs": offs}
        for key in ("feat", "thr", "missl", "leafval"):
            out[key] = np.concatenate([p[key] for p in parts])
        for key in ("left", "right"):
            shifted = [np.where(p[key] >= 0, p[key] + offs[t], -1)
                       for t, p in enumerate(parts)]
            out[key] = np.concatenate(shifted).astype(np.int32)
        return out

    def split_counts(self) -> np.ndarray:
        """Number of internal nodes splitting on each feature."""
        counts = np.zeros(self.X.shape[1], dtype=np.int64)
        for tree in self.trees:
            for s in tree.internal_slots():
                counts[tree.feat[s]] += 1
        return counts


def predict_snapshot(snap: dict, X: np.ndarray, backend=None) -> np.ndarray:
    """Evaluate a stacked forest snapshot on rows of X."""
    kern = backend if backend is not None else kernels.default_backend()
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64) + 0.0)
    return kern.forest_predict(snap["offs"], snap["feat"], snap["thr"],
                               snap["missl"], snap["left"], snap["right"],
                               snap["leafval"], X)


def snapshot_to_jsonable(snap: dict) -> dict:
    return {k: np.asarray(v).tolist() for k, v in snap.items()}


def snapshot_from_jsonable(obj: dict) -> dict:
    return {
        "offs": np.asarray(obj["offs"], dtype=np.int32),
        "feat": np.asarray(obj["feat"], dtype=np.int32),
        "thr": np.asarray(obj["thr"], dtype=np.float64),
        "missl": np.asarray(obj["missl"], dtype=np.uint8),
        "left": np.asarray(obj["left"], dtype=np.int32),
        "right": np.asarray(obj["right"], dtype=np.int32),
        "leafval": np.asarray(obj["leafval"], dtype=np.float64),
    }


def draw_sigma2(ssr: float, n_obs: float, nu: float, lam: float,
                rng: np.random.Generator) -> float:
    """Inverse-gamma conjugate draw: IG((nu + N)/2, (nu*lam + SSR)/2)."""
    a = (nu + n_obs) / 2.0
    b = (nu * lam + ssr) / 2.0
    return b / rng.gamma(a)


def obs_maps_all(n_rows: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Observation maps for a plain regression: row i <-> residual i."""
    idx = np.arange(n_rows, dtype=np.int64)
    row = np.arange(n_rows, dtype=np.int32)
    c = np.ones(n_rows)
    return idx, row, c


@dataclass
class RegressionDraws:
    """Posterior draws of a single-forest homoskedastic regression."""
    snapshots: list
    sigma2: np.ndarray
    train_fit: np.ndarray             # (D, n)
    test_fit: np.ndarray | None = None


def fit_forest_regression(X, y, params: ForestParams, *, n_burn: int,
                          n_save: int, nu: float = 3.0, lam: float = 0.1,
                          rng: np.random.Generator, X_test=None,
                          keep_snapshots: bool = True,
                          backend=None) -> RegressionDraws:
    """Plain BART-style regression of y on X with sigma^2 resampling."""
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    idx, row, c = obs_maps_all(n)
    block = ForestBlock("f", X, params, idx, row, c, X_test=X_test,
                        backend=backend)
    r = y.copy()
    sigma2 = 1.0
    snaps, sig, fits, tfits = [], [], [], []
    for it in range(n_burn + n_save):
        block.sweep(r, sigma2, rng)
        sigma2 = draw_sigma2(float(r @ r), n, nu, lam, rng)
        if it >= n_burn:
            sig.append(sigma2)
            fits.append(block.fit_rows())
            if X_test is not None:
                tfits.append(block.fit_test_rows())
            if keep_snapshots:
                snaps.append(block.snapshot())
    return RegressionDraws(
        snapshots=snaps,
        sigma2=np.asarray(sig),
        train_fit=np.asarray(fits),
        test_fit=None if X_test is None else np.asarray(tfits),
    )
