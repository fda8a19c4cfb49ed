"""Posterior summaries: ATE samples, effect intervals, importance, pooling.

Everything here is a read-only computation over a ``Draws`` object, so all
functions are safe to call concurrently and are invariant to draw order
wherever the statistics themselves are (quantiles, means, counts).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import DataError
from .sampler import Draws


def _fits(draws: Draws, dataset: str) -> dict:
    if dataset == "train":
        return draws.fit_train
    if dataset == "test":
        if draws.fit_test is None:
            raise ValueError("draws carry no test-set fits")
        return draws.fit_test
    raise ValueError("dataset must be 'train' or 'test'")


def ate_posterior(draws: Draws, wave: int, weights=None,
                  dataset: str = "train") -> np.ndarray:
    """Posterior sample of the weighted average treatment effect at a wave.

    Per draw d: sum_i w_i * tau[d, i] / sum_i w_i over subjects present at
    the wave (original outcome scale). Weights default to the ones used at
    fit time for the training data, equal weights otherwise.
    """
    fits = _fits(draws, dataset)
    if wave not in fits["tau"]:
        raise ValueError(f"wave must be one of {sorted(fits['tau'])}")
    tau = fits["tau"][wave]
    if weights is None:
        if dataset == "train" and "weights" in draws.meta:
            weights = np.asarray(draws.meta["weights"], dtype=np.float64)
        else:
            weights = np.ones(tau.shape[1])
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (tau.shape[1],):
        raise ValueError("weights length must match the subject count")
    if (w < 0).any() or not np.isfinite(w).all():
        raise ValueError("weights must be finite and nonnegative")
    present = ~np.isnan(tau[0])
    w = w * present
    tot = w.sum()
    if tot <= 0:
        raise ValueError("weights are all zero on subjects present at wave")
    return np.where(present, tau, 0.0) @ w / tot


def central_interval(samples: np.ndarray, level: float) -> tuple:
    """Equal-tailed quantile interval along axis 0."""
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    a = (1.0 - level) / 2.0
    lo, hi = np.nanquantile(samples, [a, 1.0 - a], axis=0)
    return lo, hi


@dataclass
class EffectSummary:
    """Per-subject posterior summaries of growth and treatment effects."""
    level: float
    waves: list
    tau_mean: dict    # wave -> (n,)
    tau_lo: dict
    tau_hi: dict
    delta_mean: dict
    delta_lo: dict
    delta_hi: dict


def summarize_effects(draws: Draws, level: float = 0.95,
                      dataset: str = "train") -> EffectSummary:
    fits = _fits(draws, dataset)
    if draws.n_draws < 2:
        raise ValueError("need at least two draws to summarize")
    out = EffectSummary(level=level, waves=sorted(fits["tau"]), tau_mean={},
                        tau_lo={}, tau_hi={}, delta_mean={}, delta_lo={},
                        delta_hi={})
    for w in out.waves:
        for kind, mean_d, lo_d, hi_d in (
                ("tau", out.tau_mean, out.tau_lo, out.tau_hi),
                ("delta", out.delta_mean, out.delta_lo, out.delta_hi)):
            s = fits[kind][w]
            mean_d[w] = s.mean(axis=0)
            lo_d[w], hi_d[w] = central_interval(s, level)
    return out


_KINDS = ("mu", "delta", "tau")


def _snapshot_split_counts(snap: dict, n_features: int) -> np.ndarray:
    feat = np.asarray(snap["feat"])
    return np.bincount(feat[feat >= 0], minlength=n_features)


def variable_importance(draws: Draws, kind: str) -> dict:
    """Average split counts per design feature in one forest block.

    ``kind`` is "mu", "delta", "tau" (summing the per-wave forests), or a
    single block like "delta.3". One-hot columns report under their parent
    categorical column name.
    """
    base, _, wave_s = kind.partition(".")
    if base not in _KINDS:
        raise ValueError(f"forest kind must be one of {_KINDS}")
    if any(f is None for f in draws.forests):
        raise ValueError("draws were saved without forests")
    feats = draws.meta["block_features"]
    if base == "mu":
        targets = [(None, feats["mu"])]
    else:
        waves = [int(wave_s)] if wave_s else sorted(
            int(w) for w in feats[base])
        targets = []
        for w in waves:
            names = feats[base][str(w)] if str(w) in feats[base] \
                else feats[base][w]
            targets.append((w, names))

    acc: dict[str, float] = {}
    for w, names in targets:
        for name in names:
            acc.setdefault(name.split("=")[0], 0.0)
    for f in draws.forests:
        for w, names in targets:
            snap = f[base] if w is None else f[base][w]
            counts = _snapshot_split_counts(snap, len(names))
            for j, name in enumerate(names):
                acc[name.split("=")[0]] += counts[j]
    d = draws.n_draws
    return {name: v / d for name, v in acc.items()}


def growth_sd(draws: Draws, weights=None, dataset: str = "train") -> dict:
    """Spread of the per-subject posterior-mean growth, per wave.

    Returns both the weighted and unweighted standard deviation across
    subjects, a context scale for judging effect sizes.
    """
    fits = _fits(draws, dataset)
    if weights is None and dataset == "train" and "weights" in draws.meta:
        weights = np.asarray(draws.meta["weights"], dtype=np.float64)
    out = {}
    for w in sorted(fits["delta"]):
        dm = fits["delta"][w].mean(axis=0)
        ok = ~np.isnan(dm)
        vals = dm[ok]
        wt = np.ones(ok.sum()) if weights is None else \
            np.asarray(weights, dtype=np.float64)[ok]
        mean_w = vals @ wt / wt.sum()
        var_w = ((vals - mean_w) ** 2) @ wt / wt.sum()
        out[w] = {"unweighted": float(np.std(vals)),
                  "weighted": float(np.sqrt(var_w))}
    return out


_POOL_KEYS = ("schema_hash", "T", "n_train", "hp", "propensity_method",
              "block_features", "n_burn", "n_save")


def pool_chains(parts: list) -> Draws:
    """Concatenate draws from independently run chains.

    Inputs must share schema and hyperparameters; seeds and plausible-value
    indices may differ. Chains are renumbered in input order and provenance
    (source seed, original chain id) is kept in the metadata. Summaries over
    pooled draws do not depend on the input order.
    """
    if not parts:
        raise ValueError("nothing to pool")
    if len(parts) == 1:
        return parts[0]
    first = parts[0]
    for p in parts[1:]:
        for key in _POOL_KEYS:
            if p.meta.get(key) != first.meta.get(key):
                raise DataError(
                    f"cannot pool: chains disagree on {key!r}")
        if p.z_cells != first.z_cells:
            raise DataError("cannot pool: different imputed-cell sets")

    chain_meta, chains, offset = [], [], 0
    sig, zdr, forests = [], [], []
    fit_parts, test_parts = [], []
    for p in parts:
        for cm in p.meta["chains"]:
            cm = dict(cm)
            cm["source_seed"] = p.meta["seed"]
            cm["source_chain"] = cm["chain"]
            cm["chain"] = offset + cm["source_chain"]
            chain_meta.append(cm)
        chains.append(np.asarray(p.chain) + offset)
        offset += p.meta["n_chains"]
        sig.append(p.sigma2)
        zdr.append(p.z_draws)
        forests.extend(p.forests)
        fit_parts.append(p.fit_train)
        test_parts.append(p.fit_test)

    def _cat(ds):
        return {"mu": np.concatenate([d["mu"] for d in ds]),
                "delta": {w: np.concatenate([d["delta"][w] for d in ds])
                          for w in ds[0]["delta"]},
                "tau": {w: np.concatenate([d["tau"][w] for d in ds])
                        for w in ds[0]["tau"]},
                "yhat": np.concatenate([d["yhat"] for d in ds])}

    meta = dict(first.meta)
    meta["chains"] = chain_meta
    meta["n_chains"] = offset
    meta["pooled_from"] = [p.meta["seed"] for p in parts]
    has_test = all(t is not None for t in test_parts)
    return Draws(
        meta=meta,
        chain=np.concatenate(chains),
        sigma2=np.concatenate(sig),
        z_cells=list(first.z_cells),
        z_draws=np.concatenate(zdr, axis=0),
        forests=forests,
        fit_train=_cat(fit_parts),
        fit_test=_cat(test_parts) if has_test else None,
    )


# -- report and export helpers ------------------------------------------------

def ate_report(draws: Draws, weights=None, level: float = 0.95,
               dataset: str = "train") -> dict:
    """Per-wave ATE mean and interval plus growth-SD context values."""
    gsd = growth_sd(draws, weights, dataset)
    out = {"level": level, "waves": {}}
    for w in draws.waves:
        s = ate_posterior(draws, w, weights, dataset)
        lo, hi = central_interval(s, level)
        out["waves"][w] = {
            "ate_mean": float(s.mean()),
            "ate_lo": float(lo),
            "ate_hi": float(hi),
            "growth_sd_unweighted": gsd[w]["unweighted"],
            "growth_sd_weighted": gsd[w]["weighted"],
        }
    return out


def export_subject_effects(draws: Draws, path, level: float = 0.95,
                           dataset: str = "train") -> None:
    """CSV of per-subject effect summaries, one row per subject and wave."""
    import pandas as pd

    s = summarize_effects(draws, level, dataset)
    ids = draws.meta["train_ids"] if dataset == "train" else \
        list(range(draws.meta["n_test"]))
    rows = []
    for w in s.waves:
        for i, sid in enumerate(ids):
            rows.append({
                "id": sid, "wave": w,
                "tau_mean": s.tau_mean[w][i],
                "tau_lo": s.tau_lo[w][i], "tau_hi": s.tau_hi[w][i],
                "delta_mean": s.delta_mean[w][i],
                "delta_lo": s.delta_lo[w][i], "delta_hi": s.delta_hi[w][i],
            })
    pd.DataFrame(rows).to_csv(path, index=False, na_rep="")


def export_ate_samples(draws: Draws, path, weights=None,
                       dataset: str = "train") -> None:
    """CSV of raw per-draw ATE samples (columns: wave, draw, ate)."""
    import pandas as pd

    rows = []
    for w in draws.waves:
        s = ate_posterior(draws, w, weights, dataset)
        for d, v in enumerate(s):
            rows.append({"wave": w, "draw": d, "ate": v})
    pd.DataFrame(rows).to_csv(path, index=False)


def export_report(draws: Draws, path, weights=None, level: float = 0.95,
                  dataset: str = "train", extra: dict | None = None) -> None:
    rep = ate_report(draws, weights, level, dataset)
    rep["n_draws"] = draws.n_draws
    rep["n_chains"] = draws.meta["n_chains"]
    rep["package_version"] = draws.meta["package_version"]
    rep["hp"] = draws.meta["hp"]
    rep["seed"] = draws.meta["seed"]
    if extra:
        rep.update(extra)
    with open(path, "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_histogram(values: np.ndarray, path, bins: int = 40) -> None:
    """Gnuplot-ready histogram: '<bin center> <count>' lines."""
    vals = np.asarray(values, dtype=np.float64)
    vals = vals[~np.isnan(vals)]
    counts, edges = np.histogram(vals, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    fh = path if hasattr(path, "write") else open(path, "w")
    try:
        fh.write("# bin_center count\n")
        for c, k in zip(centers, counts):
            fh.write(f"{c!r} {int(k)}\n")
    finally:
        if fh is not path:
            fh.close()
