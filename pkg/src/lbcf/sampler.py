"""Joint longitudinal causal forest sampler.

The model decomposes outcomes for subject i at wave t as

    y[i,t] = mu(x[i,1]) + sum_{w=2..t} ( delta_w(hist) + tau_w(hist) * z[i,w] ) + noise

with one forest for the baseline surface mu, and per-wave forests for growth
(delta_w) and treatment effect (tau_w). mu contributes to every observed
outcome; delta_w and tau_w contribute to all outcomes at waves >= w, the tau
term only for subjects treated at wave w. Backfitting MCMC cycles through
every tree, then the noise variance, then any missing treatment indicators.

Outcomes are standardized internally (pooled mean / sample sd); every stored
quantity is on the original scale except ``sigma2``, whose standardized-scale
draws are stored alongside the chain's standardizer.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import __version__, _engine, kernels, propensity as propensity_mod
from ._engine import ForestBlock, ForestParams
from .data import (DataError, PanelData, Standardizer, make_standardizer,
                   plausible_value_views)
from .trees import MoveProbs


class EstimationRefused(RuntimeError):
    """The requested estimand is not identified from the supplied data."""


@dataclass
class Hyperparams:
    """Sampler settings; leaf variances default to scale/n_trees rules."""
    n_trees_mu: int = 100
    n_trees_delta: int = 70
    n_trees_tau: int = 30
    alpha_mu: float = 0.95
    beta_mu: float = 2.0
    alpha_delta: float = 0.95
    beta_delta: float = 2.0
    alpha_tau: float = 0.25
    beta_tau: float = 3.0
    leaf_var_mu: float | None = None      # default 1 / n_trees_mu
    leaf_var_delta: float | None = None   # default 1 / n_trees_delta
    leaf_var_tau: float | None = None     # default 0.25 / n_trees_tau
    nu: float = 3.0
    lam: float = 0.1
    min_leaf: int = 5
    n_burn: int = 500
    n_save: int = 500
    p_grow: float = 0.25
    p_prune: float = 0.25
    p_change: float = 0.40
    p_swap: float = 0.10

    def resolved(self) -> dict:
        d = asdict(self)
        if d["leaf_var_mu"] is None:
            d["leaf_var_mu"] = 1.0 / self.n_trees_mu
        if d["leaf_var_delta"] is None:
            d["leaf_var_delta"] = 1.0 / self.n_trees_delta
        if d["leaf_var_tau"] is None:
            d["leaf_var_tau"] = 0.25 / self.n_trees_tau
        return d

    def probs(self) -> MoveProbs:
        total = self.p_grow + self.p_prune + self.p_change + self.p_swap
        if abs(total - 1.0) > 1e-9:
            raise ValueError("move probabilities must sum to 1")
        return MoveProbs(self.p_grow, self.p_prune, self.p_change, self.p_swap)


def _feature_cols(data: PanelData, max_wave: int) -> list[int]:
    return [j for j, f in enumerate(data.features) if f.wave <= max_wave]


def block_feature_names(data: PanelData) -> dict:
    """Design column names per forest block."""
    out = {"mu": [data.features[j].name for j in _feature_cols(data, 1)],
           "delta": {}, "tau": {}}
    for w in range(2, data.T + 1):
        base = [data.features[j].name for j in _feature_cols(data, w)]
        base += [f"y.{t}" for t in range(1, w)]
        out["tau"][w] = list(base)
        out["delta"][w] = (base + [f"z.{v}" for v in range(2, w)]
                           + [f"pi.{w}"])
    return out


def _design(data: PanelData, w: int, pi_col: np.ndarray | None) -> np.ndarray:
    """Rows for every subject; caller subsets to the wave's block rows.

    The growth design (pi_col given) carries the confounding adjustments: the
    treatment history z.2..z.{w-1} as ordinary features, with unobserved cells
    left NaN so the trees route them like any other missing value, then the
    wave's propensity score. The moderation design (pi_col None) stays lean:
    covariates and prior outcomes only. The current wave's treatment never
    appears; it acts only as the multiplier on the tau contribution.
    """
    parts = [data.X[:, _feature_cols(data, w)]]
    for t in range(1, w):
        parts.append(data.y[:, t - 1:t])
    if pi_col is not None:
        for v in range(2, w):
            parts.append(data.z[:, v - 2:v - 1])
        parts.append(pi_col.reshape(-1, 1))
    return np.concatenate(parts, axis=1)


def schema_hash(data: PanelData) -> str:
    blob = json.dumps(data.schema_signature(), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------

class _ChainState:
    """All mutable state of one MCMC chain."""

    def __init__(self, view: PanelData, hp: Hyperparams, pmodel, pscores,
                 rng: np.random.Generator, test: PanelData | None,
                 pscores_test, backend):
        self.view = view
        self.hp = hp
        self.hpr = hp.resolved()
        self.rng = rng
        self.backend = backend
        self.pmodel = pmodel
        self.pscores = pscores
        n, T = view.n, view.T

        self.std = make_standardizer(view.y)
        y_std = self.std.apply(view.y)

        # flat observation layout, subject-major, waves ascending
        self.n_waves = view.n_waves_observed()
        self.subj_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(self.n_waves, out=self.subj_ptr[1:])
        self.N = int(self.subj_ptr[-1])
        self.obs_subj = np.repeat(np.arange(n, dtype=np.int32), self.n_waves)
        self.obs_wave = np.concatenate(
            [np.arange(1, k + 1, dtype=np.int32) for k in self.n_waves])
        self.y_flat = y_std[self.obs_subj, self.obs_wave - 1]
        self.r = self.y_flat.copy()          # fits start at zero
        self.sigma2 = 1.0

        # current treatment state; missing cells for present subjects are
        # imputed, starting from a prior draw
        self.z_cur = view.z.copy()
        self.z_cells = []
        for w in range(2, T + 1):
            miss = view.present(w) & np.isnan(view.z[:, w - 2])
            for i in np.nonzero(miss)[0]:
                self.z_cells.append((int(i), w))
        if self.z_cells:
            u = rng.random(len(self.z_cells))
            for k, (i, w) in enumerate(self.z_cells):
                self.z_cur[i, w - 2] = 1.0 if u[k] < pscores[i, w - 2] else 0.0

        probs = hp.probs()
        mu_params = ForestParams(hp.n_trees_mu, self.hpr["leaf_var_mu"],
                                 hp.alpha_mu, hp.beta_mu, hp.min_leaf, probs)
        de_params = ForestParams(hp.n_trees_delta, self.hpr["leaf_var_delta"],
                                 hp.alpha_delta, hp.beta_delta, hp.min_leaf,
                                 probs)
        ta_params = ForestParams(hp.n_trees_tau, self.hpr["leaf_var_tau"],
                                 hp.alpha_tau, hp.beta_tau, hp.min_leaf, probs)

        X_mu = _design(view, 1, None)[:, :len(_feature_cols(view, 1))]
        X_mu_test = None
        if test is not None:
            X_mu_test = test.X[:, _feature_cols(test, 1)]
        self.mu = ForestBlock(
            "mu", X_mu, mu_params,
            obs_idx=np.arange(self.N, dtype=np.int64),
            obs_row=self.obs_subj,
            c=self.n_waves.astype(np.float64),
            X_test=X_mu_test, backend=backend)

        self.delta: dict[int, ForestBlock] = {}
        self.tau: dict[int, ForestBlock] = {}
        self.wave_rows: dict[int, np.ndarray] = {}    # block row -> subject
        self.wave_obs: dict[int, tuple] = {}          # full maps for the wave
        for w in range(2, T + 1):
            rows = np.nonzero(view.present(w))[0]
            self.wave_rows[w] = rows
            n_w = len(rows)
            seg = (self.n_waves[rows] - (w - 1)).astype(np.int64)
            obs_row = np.repeat(np.arange(n_w, dtype=np.int32), seg)
            obs_idx = np.concatenate([
                np.arange(self.subj_ptr[i] + (w - 1), self.subj_ptr[i + 1],
                          dtype=np.int64)
                for i in rows]) if n_w else np.zeros(0, dtype=np.int64)
            c = seg.astype(np.float64)
            self.wave_obs[w] = (obs_idx, obs_row, c, seg)

            Xd = _design(view, w, pscores[:, w - 2])[rows]
            Xt = _design(view, w, None)[rows]
            Xd_test = Xt_test = None
            if test is not None:
                Xd_test = _design(test, w, pscores_test[:, w - 2])
                Xt_test = _design(test, w, None)
            self.delta[w] = ForestBlock(f"delta.{w}", Xd, de_params, obs_idx,
                                        obs_row, c, X_test=Xd_test,
                                        backend=backend)
            self.tau[w] = ForestBlock(f"tau.{w}", Xt, ta_params,
                                      *self._tau_maps(w), X_test=Xt_test,
                                      backend=backend)

    def _tau_maps(self, w: int) -> tuple:
        """Observation maps for the tau block given the current z."""
        obs_idx, obs_row, c, seg = self.wave_obs[w]
        rows = self.wave_rows[w]
        treated = self.z_cur[rows, w - 2] == 1.0
        mask = np.repeat(treated, seg)
        return obs_idx[mask], obs_row[mask], c * treated

    def sweep(self) -> None:
        rng = self.rng
        self.mu.sweep(self.r, self.sigma2, rng)
        for w in sorted(self.delta):
            self.delta[w].sweep(self.r, self.sigma2, rng)
            self.tau[w].sweep(self.r, self.sigma2, rng)
        ssr = float(self.r @ self.r)
        self.sigma2 = _engine.draw_sigma2(ssr, self.N, self.hp.nu,
                                          self.hp.lam, rng)
        self._impute_z()

    def _impute_z(self) -> None:
        """Gibbs update of missing treatment indicators (then tau maps)."""
        if not self.z_cells:
            return
        rng = self.rng
        by_wave: dict[int, list[int]] = {}
        for i, w in self.z_cells:
            by_wave.setdefault(w, []).append(i)
        touched = False
        for w in sorted(by_wave):
            subs = by_wave[w]
            rows = self.wave_rows[w]
            row_of = {int(s): k for k, s in enumerate(rows)}
            taufit = self.tau[w].fit_rows()
            u = rng.random(len(subs))
            for k, i in enumerate(subs):
                tf = taufit[row_of[i]]
                span = slice(self.subj_ptr[i] + (w - 1), self.subj_ptr[i + 1])
                z_old = self.z_cur[i, w - 2]
                r0 = self.r[span] + z_old * tf
                r1 = r0 - tf
                ssq0 = float(r0 @ r0)
                ssq1 = float(r1 @ r1)
                p = self.pscores[i, w - 2]
                prob1 = 1.0 / (1.0 + ((1.0 - p) / p)
                               * np.exp((ssq1 - ssq0) / (2.0 * self.sigma2)))
                z_new = 1.0 if u[k] < prob1 else 0.0
                if z_new != z_old:
                    self.r[span] -= (z_new - z_old) * tf
                    self.z_cur[i, w - 2] = z_new
                    touched = True
        if touched:
            for w in sorted(self.tau):
                self.tau[w].set_obs(*self._tau_maps(w))

    # -- snapshots ---------------------------------------------------------

    def _expand(self, w: int, vals: np.ndarray) -> np.ndarray:
        out = np.full(self.view.n, np.nan)
        out[self.wave_rows[w]] = vals
        return out

    def component_fits(self) -> dict:
        """Original-scale component fits for the training data."""
        sd = self.std.sd
        out = {"mu": self.std.invert(self.mu.fit_rows()),
               "delta": {}, "tau": {}}
        for w in sorted(self.delta):
            out["delta"][w] = self._expand(w, sd * self.delta[w].fit_rows())
            out["tau"][w] = self._expand(w, sd * self.tau[w].fit_rows())
        return out

    def component_fits_test(self, test: PanelData) -> dict:
        sd = self.std.sd
        out = {"mu": self.std.invert(self.mu.fit_test_rows()),
               "delta": {}, "tau": {}}
        for w in sorted(self.delta):
            out["delta"][w] = sd * self.delta[w].fit_test_rows()
            out["tau"][w] = sd * self.tau[w].fit_test_rows()
        return out

    def snapshot_forests(self) -> dict:
        return {"mu": self.mu.snapshot(),
                "delta": {w: b.snapshot() for w, b in self.delta.items()},
                "tau": {w: b.snapshot() for w, b in self.tau.items()}}


def compose_yhat(comp: dict, z: np.ndarray, T: int,
                 observed: np.ndarray | None = None) -> np.ndarray:
    """Cumulative fitted trajectories from component fits.

    yhat[:, t] = mu + sum_{w<=t+1} (delta_w + tau_w * z_w); waves with
    unknown treatment propagate NaN. ``observed`` masks unobserved cells.
    """
    n = len(comp["mu"])
    yhat = np.full((n, T), np.nan)
    yhat[:, 0] = comp["mu"]
    for w in range(2, T + 1):
        step = comp["delta"][w] + comp["tau"][w] * z[:, w - 2]
        yhat[:, w - 1] = yhat[:, w - 2] + step
    if observed is not None:
        yhat[~observed] = np.nan
    return yhat


@dataclass
class Draws:
    """Saved posterior draws (all fits on the original outcome scale)."""
    meta: dict
    chain: np.ndarray                 # (D,) chain index per draw
    sigma2: np.ndarray                # (D,) standardized scale
    z_cells: list                     # [(subject_index, wave), ...]
    z_draws: np.ndarray               # (D, n_cells) int8
    forests: list                     # per draw: {"mu": snap, "delta": {w:..}, ..}
    fit_train: dict                   # {"mu": (D,n), "delta": {w: (D,n)}, ...}
    fit_test: dict | None = None

    @property
    def n_draws(self) -> int:
        return len(self.sigma2)

    @property
    def waves(self) -> list[int]:
        return sorted(self.fit_train["delta"])

    def sigma2_original(self) -> np.ndarray:
        """Noise variance draws mapped back to the original outcome scale."""
        sds = {c["chain"]: c["standardizer"]["sd"] for c in self.meta["chains"]}
        scale = np.asarray([sds[int(c)] ** 2 for c in self.chain])
        return self.sigma2 * scale


def _wave_all_or_refuse(data: PanelData, w: int) -> str:
    """Classify wave w treatment pattern: 'mixed', 'none', or refuse."""
    present = data.present(w)
    zc = data.z[present, w - 2]
    obs = zc[~np.isnan(zc)]
    if obs.size == 0:
        raise DataError(f"wave {w}: no observed treatment indicators")
    if (obs == 1.0).all():
        raise EstimationRefused(
            f"wave {w}: every subject with observed treatment is treated; "
            "growth and effect are not separately identified (all treated)")
    if (obs == 0.0).all():
        return "none"
    return "mixed"


def _chain_propensity(view: PanelData, method: str, seed_seq,
                      backend) -> propensity_mod.PropensityModel:
    """Per-wave models with degenerate all-control waves handled inline."""
    waves = {}
    rng_list = seed_seq.spawn(view.T - 1)
    for w in range(2, view.T + 1):
        kind = _wave_all_or_refuse(view, w)
        if kind == "none":
            present = view.present(w)
            zc = view.z[present, w - 2]
            prop = float(np.nanmean(zc))
            waves[w] = propensity_mod.WaveModel(
                w, "constant", value=float(np.clip(prop, propensity_mod.CLIP_LO,
                                                   propensity_mod.CLIP_HI)))
        else:
            waves[w] = propensity_mod.fit_wave(
                view, w, method, np.random.default_rng(rng_list[w - 2]),
                backend=backend)
    return propensity_mod.PropensityModel(method, waves)


def fit(data: PanelData, hp: Hyperparams | None = None, *,
        propensity: str = "probit_forest", seed: int = 0, n_chains: int = 1,
        test: PanelData | None = None, keep_forests: bool = True,
        backend=None, progress=None, chain_filter=None) -> Draws:
    """Run the sampler and return pooled posterior draws.

    With plausible-value columns present, one chain runs per plausible value
    (its own standardizer and propensity fit); otherwise ``n_chains``
    independent chains run on the same data. Draws are pooled by chain index
    so results do not depend on execution order.

    ``chain_filter`` restricts the run to a subset of chain indices while
    keeping each chain's derived seed unchanged; partial runs merge back with
    :func:`merge_chain_runs` into the same draws a full run produces.
    """
    hp = hp or Hyperparams()
    if propensity not in propensity_mod.METHODS:
        raise ValueError(
            f"propensity method must be one of {propensity_mod.METHODS}")
    data.validate()
    if data.T < 2:
        raise DataError("model needs at least two waves of outcomes")
    if backend is None:
        backend = kernels.default_backend()

    if data.pv is not None:
        if n_chains != 1:
            raise ValueError("with plausible values, chains are one per "
                             "plausible value; leave n_chains at 1")
        views = plausible_value_views(data)
        pv_ids = list(range(1, len(views) + 1))
    else:
        views = [data] * n_chains
        pv_ids = [None] * n_chains

    for w in range(2, data.T + 1):
        _wave_all_or_refuse(data, w)  # refuse all-treated waves up front

    hpr = hp.resolved()
    root = np.random.SeedSequence(seed)
    chain_seeds = root.spawn(len(views))
    if chain_filter is None:
        selected = list(range(len(views)))
    else:
        selected = sorted(set(int(c) for c in chain_filter))
        if not selected or selected[0] < 0 or selected[-1] >= len(views):
            raise ValueError(f"chain_filter must select indices in "
                             f"[0, {len(views) - 1}]")

    chain_meta = []
    chain_states = []
    all_z_cells = None
    for c in selected:
        view, pv_id = views[c], pv_ids[c]
        ss = chain_seeds[c]
        prop_ss, mcmc_ss = ss.spawn(2)
        pmodel = _chain_propensity(view, propensity, prop_ss, backend)
        pscores = np.full((view.n, view.T - 1), np.nan)
        for w, wm in pmodel.waves.items():
            if wm.train_scores is not None:
                pscores[:, w - 2] = wm.train_scores
            else:
                pscores[:, w - 2] = wm.predict(view)
        pscores_test = pmodel.scores(test) if test is not None else None
        state = _ChainState(view, hp, pmodel, pscores,
                            np.random.default_rng(mcmc_ss), test,
                            pscores_test, backend)
        chain_states.append(state)
        chain_meta.append({
            "chain": c,
            "pv": pv_id,
            "standardizer": {"mean": state.std.mean, "sd": state.std.sd},
            "propensity": pmodel.to_jsonable(),
            "pscores_train": np.where(np.isnan(pscores), None,
                                      pscores).tolist(),
        })
        if all_z_cells is None:
            all_z_cells = state.z_cells

    meta = {
        "format": "lbcf-draws",
        "version": 1,
        "package_version": __version__,
        "T": data.T,
        "n_train": data.n,
        "train_ids": list(map(str, data.ids)),
        "weights": data.weights.tolist(),
        "schema": data.schema_signature(),
        "schema_hash": schema_hash(data),
        "hp": hpr,
        "propensity_method": propensity,
        "seed": seed,
        "n_chains": len(views),
        "n_burn": hp.n_burn,
        "n_save": hp.n_save,
        "block_features": block_feature_names(data),
        "has_test": test is not None,
        "n_test": 0 if test is None else test.n,
        "backend": getattr(backend, "BACKEND", "unknown"),
        "z_cells": [[i, w] for i, w in (all_z_cells or [])],
    }

    T, n = data.T, data.n
    total = hp.n_burn + hp.n_save
    chains, sig, zdr, forests = [], [], [], []
    fit_train = {"mu": [], "delta": {w: [] for w in range(2, T + 1)},
                 "tau": {w: [] for w in range(2, T + 1)}, "yhat": []}
    fit_test = None
    if test is not None:
        fit_test = {"mu": [], "delta": {w: [] for w in range(2, T + 1)},
                    "tau": {w: [] for w in range(2, T + 1)}, "yhat": []}

    for c, state in zip(selected, chain_states):
        for it in range(total):
            state.sweep()
            if it >= hp.n_burn:
                chains.append(c)
                sig.append(state.sigma2)
                zdr.append([int(state.z_cur[i, w - 2])
                            for i, w in state.z_cells])
                forests.append(state.snapshot_forests() if keep_forests
                               else None)
                comp = state.component_fits()
                fit_train["mu"].append(comp["mu"])
                for w in range(2, T + 1):
                    fit_train["delta"][w].append(comp["delta"][w])
                    fit_train["tau"][w].append(comp["tau"][w])
                fit_train["yhat"].append(
                    compose_yhat(comp, state.z_cur, T, state.view.observed()))
                if test is not None:
                    compt = state.component_fits_test(test)
                    fit_test["mu"].append(compt["mu"])
                    for w in range(2, T + 1):
                        fit_test["delta"][w].append(compt["delta"][w])
                        fit_test["tau"][w].append(compt["tau"][w])
                    fit_test["yhat"].append(
                        compose_yhat(compt, test.z, T))
            if progress is not None and (it + 1) % max(1, total // 10) == 0:
                print(f"[chain {c + 1}/{len(views)}] "
                      f"sweep {it + 1}/{total}", file=progress)

    def _stack(d):
        out = {"mu": np.asarray(d["mu"]),
               "delta": {w: np.asarray(v) for w, v in d["delta"].items()},
               "tau": {w: np.asarray(v) for w, v in d["tau"].items()},
               "yhat": np.asarray(d["yhat"])}
        return out

    meta["chains"] = chain_meta
    return Draws(
        meta=meta,
        chain=np.asarray(chains, dtype=np.int32),
        sigma2=np.asarray(sig),
        z_cells=list(all_z_cells or []),
        z_draws=np.asarray(zdr, dtype=np.int8).reshape(len(sig), -1),
        forests=forests,
        fit_train=_stack(fit_train),
        fit_test=None if test is None else _stack(fit_test),
    )


def merge_chain_runs(parts: list[Draws]) -> Draws:
    """Reassemble chain-filtered runs of the same fit into one Draws object.

    Every part must come from `fit` called with identical arguments apart
    from ``chain_filter``; together the parts must cover each chain exactly
    once. The merge reproduces the unfiltered fit bit for bit.
    """
    if not parts:
        raise ValueError("no parts to merge")
    base = parts[0].meta
    for p in parts[1:]:
        for key, val in base.items():
            if key == "chains":
                continue
            if p.meta.get(key) != val:
                raise ValueError(f"parts disagree on meta field {key!r}")
    by_chain = {}
    for p in parts:
        for cm in p.meta["chains"]:
            if cm["chain"] in by_chain:
                raise ValueError(f"chain {cm['chain']} appears twice")
            by_chain[cm["chain"]] = (p, cm)
    n_chains = base["n_chains"]
    if sorted(by_chain) != list(range(n_chains)):
        raise ValueError(f"parts cover chains {sorted(by_chain)}, "
                         f"expected 0..{n_chains - 1}")

    order = []  # (part, chain draw mask) in chain-index order
    for c in range(n_chains):
        p, _ = by_chain[c]
        order.append((p, p.chain == c))

    def _cat(get):
        return np.concatenate([get(p)[mask] for p, mask in order], axis=0)

    meta = dict(base)
    meta["chains"] = [by_chain[c][1] for c in range(n_chains)]
    forests = None
    if all(p.forests is not None for p, _ in order):
        forests = []
        for p, mask in order:
            forests.extend(f for f, keep in zip(p.forests, mask) if keep)

    def _cat_fits(key):
        ref = getattr(parts[0], key)
        if ref is None:
            return None
        waves = list(ref["delta"])
        return {
            "mu": _cat(lambda p: getattr(p, key)["mu"]),
            "delta": {w: _cat(lambda p, w=w: getattr(p, key)["delta"][w])
                      for w in waves},
            "tau": {w: _cat(lambda p, w=w: getattr(p, key)["tau"][w])
                    for w in waves},
            "yhat": _cat(lambda p: getattr(p, key)["yhat"]),
        }

    return Draws(
        meta=meta,
        chain=_cat(lambda p: p.chain),
        sigma2=_cat(lambda p: p.sigma2),
        z_cells=list(parts[0].z_cells),
        z_draws=_cat(lambda p: p.z_draws),
        forests=forests,
        fit_train=_cat_fits("fit_train"),
        fit_test=_cat_fits("fit_test"),
    )


# -- prediction --------------------------------------------------------------

def predict(draws: Draws, newdata: PanelData, backend=None) -> dict:
    """Evaluate every saved draw's forests on new data.

    Returns original-scale component fits keyed like ``fit_train``. Applying
    this to the training data reproduces the stored fits exactly.
    """
    if backend is None:
        backend = kernels.default_backend()
    if draws.forests is None or any(f is None for f in draws.forests):
        raise ValueError("draws were saved without forests; cannot predict")
    if schema_hash(newdata) != draws.meta["schema_hash"]:
        raise DataError("new data schema does not match the fitted model")
    T = draws.meta["T"]
    by_chain = {c["chain"]: c for c in draws.meta["chains"]}
    # per-chain designs (propensity scores differ per chain)
    designs = {}
    for cid, cm in by_chain.items():
        pmodel = propensity_mod.PropensityModel.from_jsonable(cm["propensity"])
        ps = pmodel.scores(newdata)
        d = {"mu": newdata.X[:, _feature_cols(newdata, 1)], "delta": {},
             "tau": {}, "std": Standardizer(**cm["standardizer"])}
        for w in range(2, T + 1):
            d["delta"][w] = _design(newdata, w, ps[:, w - 2])
            d["tau"][w] = _design(newdata, w, None)
        designs[cid] = d

    m = newdata.n
    D = draws.n_draws
    out = {"mu": np.empty((D, m)),
           "delta": {w: np.empty((D, m)) for w in range(2, T + 1)},
           "tau": {w: np.empty((D, m)) for w in range(2, T + 1)},
           "yhat": np.empty((D, m, T))}
    for d in range(D):
        des = designs[int(draws.chain[d])]
        std = des["std"]
        sd = std.sd
        f = draws.forests[d]
        comp = {"mu": std.invert(
            _engine.predict_snapshot(f["mu"], des["mu"], backend)),
            "delta": {}, "tau": {}}
        for w in range(2, T + 1):
            comp["delta"][w] = sd * _engine.predict_snapshot(
                f["delta"][w], des["delta"][w], backend)
            comp["tau"][w] = sd * _engine.predict_snapshot(
                f["tau"][w], des["tau"][w], backend)
        out["mu"][d] = comp["mu"]
        for w in range(2, T + 1):
            out["delta"][w][d] = comp["delta"][w]
            out["tau"][w][d] = comp["tau"][w]
        out["yhat"][d] = compose_yhat(comp, newdata.z, T)
    return out


# -- draw-file round trip -----------------------------------------------------

def _forests_jsonable(f: dict) -> dict:
    return {"mu": _engine.snapshot_to_jsonable(f["mu"]),
            "delta": {str(w): _engine.snapshot_to_jsonable(s)
                      for w, s in f["delta"].items()},
            "tau": {str(w): _engine.snapshot_to_jsonable(s)
                    for w, s in f["tau"].items()}}


def _forests_from_jsonable(obj: dict) -> dict:
    return {"mu": _engine.snapshot_from_jsonable(obj["mu"]),
            "delta": {int(w): _engine.snapshot_from_jsonable(s)
                      for w, s in obj["delta"].items()},
            "tau": {int(w): _engine.snapshot_from_jsonable(s)
                    for w, s in obj["tau"].items()}}


def _fits_jsonable(fit: dict, d: int) -> dict:
    def clean(a):
        return np.where(np.isnan(a), None, a).tolist()
    out = {"mu": fit["mu"][d].tolist(),
           "delta": {str(w): clean(v[d]) for w, v in fit["delta"].items()},
           "tau": {str(w): clean(v[d]) for w, v in fit["tau"].items()},
           "yhat": clean(fit["yhat"][d])}
    return out


def save_draws(draws: Draws, path) -> None:
    """Write newline-delimited JSON: a metadata line, then one line per draw.

    Floats serialize via repr and parse back to the identical doubles, so a
    reloaded file predicts bit-identically.
    """
    with open(path, "w") as fh:
        fh.write(json.dumps({"meta": draws.meta}, separators=(",", ":"))
                 + "\n")
        for d in range(draws.n_draws):
            line = {
                "chain": int(draws.chain[d]),
                "sigma2": float(draws.sigma2[d]),
                "z": draws.z_draws[d].tolist() if len(draws.z_cells) else [],
                "fit": _fits_jsonable(draws.fit_train, d),
            }
            if draws.forests[d] is not None:
                line["forests"] = _forests_jsonable(draws.forests[d])
            if draws.fit_test is not None:
                line["fit_test"] = _fits_jsonable(draws.fit_test, d)
            fh.write(json.dumps(line, separators=(",", ":")) + "\n")


def load_draws(path) -> Draws:
    with open(path) as fh:
        header = json.loads(fh.readline())
        meta = header["meta"]
        T = meta["T"]
        chains, sig, zdr, forests = [], [], [], []
        fit_train = {"mu": [], "delta": {w: [] for w in range(2, T + 1)},
                     "tau": {w: [] for w in range(2, T + 1)}, "yhat": []}
        fit_test = None
        for raw in fh:
            line = json.loads(raw)
            chains.append(line["chain"])
            sig.append(line["sigma2"])
            zdr.append(line["z"])
            forests.append(_forests_from_jsonable(line["forests"])
                           if "forests" in line else None)

            def num(a):
                return np.asarray([[np.nan if v is None else v for v in row]
                                   if isinstance(row, list)
                                   else (np.nan if row is None else row)
                                   for row in a], dtype=np.float64) \
                    if a and isinstance(a[0], list) else \
                    np.asarray([np.nan if v is None else v for v in a],
                               dtype=np.float64)

            fit = line["fit"]
            fit_train["mu"].append(np.asarray(fit["mu"], dtype=np.float64))
            for w in range(2, T + 1):
                fit_train["delta"][w].append(num(fit["delta"][str(w)]))
                fit_train["tau"][w].append(num(fit["tau"][str(w)]))
            fit_train["yhat"].append(num(fit["yhat"]))
            if "fit_test" in line:
                if fit_test is None:
                    fit_test = {"mu": [],
                                "delta": {w: [] for w in range(2, T + 1)},
                                "tau": {w: [] for w in range(2, T + 1)},
                                "yhat": []}
                ft = line["fit_test"]
                fit_test["mu"].append(np.asarray(ft["mu"], dtype=np.float64))
                for w in range(2, T + 1):
                    fit_test["delta"][w].append(num(ft["delta"][str(w)]))
                    fit_test["tau"][w].append(num(ft["tau"][str(w)]))
                fit_test["yhat"].append(num(ft["yhat"]))

    def _stack(d):
        return {"mu": np.asarray(d["mu"]),
                "delta": {w: np.asarray(v) for w, v in d["delta"].items()},
                "tau": {w: np.asarray(v) for w, v in d["tau"].items()},
                "yhat": np.asarray(d["yhat"])}

    n_draws = len(sig)
    return Draws(
        meta=meta,
        chain=np.asarray(chains, dtype=np.int32),
        sigma2=np.asarray(sig),
        z_cells=[(int(i), int(w)) for i, w in
                 meta.get("z_cells", [])] if meta.get("z_cells") else [],
        z_draws=np.asarray(zdr, dtype=np.int8).reshape(n_draws, -1),
        forests=forests,
        fit_train=_stack(fit_train),
        fit_test=None if fit_test is None else _stack(fit_test),
    )
