"""Simulation benchmarks: two generating processes with stored ground truth.

DGP1 is a two-wave Friedman-style process with heterogeneous growth and
treatment effects, scored on held-out test rows. DGP2 is a three-transition
panel with time-varying covariates and a constant direct treatment effect of
one, scored on the training sample. Replications are independently seeded
(replication k uses ``seed ^ k``), written to an append-only record file,
and resumable after interruption.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit

from . import __version__, analysis, kernels, sampler
from ._engine import ForestParams, fit_forest_regression
from .data import from_frame
from .sampler import Hyperparams


# -- generators ---------------------------------------------------------------

@dataclass
class Dgp1Instance:
    seed: int
    sigma_dgp: float
    null_tau: bool
    n_train: int
    n_test: int
    X: np.ndarray        # (n, 20): wave-1 then wave-2 covariates
    mu: np.ndarray
    delta: np.ndarray
    tau: np.ndarray
    p: np.ndarray
    z: np.ndarray
    y1: np.ndarray
    y2: np.ndarray

    def _frame(self, sl: slice, offset: int) -> pd.DataFrame:
        cols = {"id": np.arange(self.X[sl].shape[0]) + offset,
                "y.1": self.y1[sl], "y.2": self.y2[sl], "z.2": self.z[sl]}
        for j in range(10):
            cols[f"x.{j + 1}.1"] = self.X[sl, j]
        for j in range(10, 20):
            cols[f"x.{j + 1}.2"] = self.X[sl, j]
        return pd.DataFrame(cols)

    def train_frame(self) -> pd.DataFrame:
        return self._frame(slice(0, self.n_train), 0)

    def test_frame(self) -> pd.DataFrame:
        return self._frame(slice(self.n_train, None), self.n_train)

    def truth_frame(self, which: str = "train") -> pd.DataFrame:
        sl = slice(0, self.n_train) if which == "train" \
            else slice(self.n_train, None)
        off = 0 if which == "train" else self.n_train
        return pd.DataFrame({
            "id": np.arange(self.mu[sl].shape[0]) + off,
            "mu": self.mu[sl], "delta": self.delta[sl],
            "tau": self.tau[sl], "p": self.p[sl]})


def dgp1_mu(X: np.ndarray) -> np.ndarray:
    return (10.0 * np.sin(np.pi * X[:, 0] * X[:, 1])
            + 20.0 * (X[:, 2] - 0.5) ** 2 + 10.0 * X[:, 3] + 5.0 * X[:, 4])


def dgp1_delta(X: np.ndarray) -> np.ndarray:
    return dgp1_mu(X) / 3.0 + 3.0 * X[:, 10] ** 2 + 2.0 * X[:, 14] ** 2


def dgp1_tau(X: np.ndarray) -> np.ndarray:
    return -X[:, 3] - X[:, 13] ** 2 - X[:, 14] ** 3


def gen_dgp1(n_train: int = 500, n_test: int = 1000, sigma_dgp: float = 1.0,
             seed: int = 0, null_tau: bool = False) -> Dgp1Instance:
    """Two-wave Friedman-style instance; train rows first, then test rows."""
    if sigma_dgp <= 0:
        raise ValueError("sigma_dgp must be positive")
    n = n_train + n_test
    rng = np.random.default_rng(seed)
    x_w1 = rng.random((n, 10))
    x_w2 = x_w1 + 0.4 * rng.random((n, 10))
    X = np.concatenate([x_w1, x_w2], axis=1)
    mu = dgp1_mu(X)
    delta = dgp1_delta(X)
    tau = np.zeros(n) if null_tau else dgp1_tau(X)
    v = mu + delta
    p = expit((v - v.mean()) / v.std(ddof=1))
    z = (rng.random(n) < p).astype(np.float64)
    y1 = mu + sigma_dgp * rng.standard_normal(n)
    y2 = mu + delta + tau * z + sigma_dgp * rng.standard_normal(n)
    return Dgp1Instance(seed, sigma_dgp, null_tau, n_train, n_test,
                        X, mu, delta, tau, p, z, y1, y2)


@dataclass
class Dgp2Instance:
    seed: int
    n: int
    U: np.ndarray
    L: np.ndarray        # (n, 5), column t holds L_t, column 0 is L_0 = 0
    A: np.ndarray        # (n, 5), same layout
    Y: dict              # t -> outcomes, t = 2, 3, 4
    ate: dict            # transition wave -> true direct effect (exactly 1)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "id": np.arange(self.n),
            "y.1": self.Y[2], "y.2": self.Y[3], "y.3": self.Y[4],
            "z.2": self.A[:, 3], "z.3": self.A[:, 4],
            "x.U.1": self.U,
            "x.L1.1": self.L[:, 1], "x.L2.1": self.L[:, 2],
            "x.A1.1": self.A[:, 1], "x.A2.1": self.A[:, 2],
            "x.L3.2": self.L[:, 3], "x.L4.3": self.L[:, 4],
        })


def gen_dgp2(n: int = 500, seed: int = 0) -> Dgp2Instance:
    """Time-varying-covariate panel; direct effect of each treatment is 1.

    L_t and A_t recursions run through t = 4 so that every outcome's direct
    treatment term is defined; the outcome lag coefficient for Y_t is
    gamma_{t-1} with (gamma_1, gamma_2, gamma_3) = (0, 0.5, 0.5).
    """
    rng = np.random.default_rng(seed)
    U = rng.standard_normal(n)
    L = np.zeros((n, 5))
    A = np.zeros((n, 5))
    for t in range(1, 5):
        L[:, t] = (1.0 + L[:, t - 1] + 0.5 * A[:, t - 1] + U
                   + rng.standard_normal(n))
        prob = expit(1.0 + 0.1 * L[:, t] + 0.1 * A[:, t - 1])
        A[:, t] = (rng.random(n) < prob).astype(np.float64)
    gamma = {1: 0.0, 2: 0.5, 3: 0.5}
    Y = {}
    for t in (2, 3, 4):
        Y[t] = (1.0 + A[:, t] + gamma[t - 1] * A[:, t - 1]
                + L[:, 1:t + 1].sum(axis=1) + U + rng.standard_normal(n))
    return Dgp2Instance(seed, n, U, L, A, Y, ate={2: 1.0, 3: 1.0})


# -- metrics ------------------------------------------------------------------

def evaluate_metrics(truth, est, lo=None, hi=None) -> dict:
    """RMSE, mean absolute bias, interval coverage, and mean width."""
    truth = np.asarray(truth, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if truth.shape != est.shape:
        raise ValueError("truth and estimate lengths differ")
    out = {"rmse": float(np.sqrt(np.mean((truth - est) ** 2))),
           "bias": float(np.mean(np.abs(truth - est)))}
    if lo is not None and hi is not None:
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if lo.shape != truth.shape or hi.shape != truth.shape:
            raise ValueError("interval lengths differ from truth")
        out["coverage"] = float(np.mean((lo <= truth) & (truth <= hi)))
        out["width"] = float(np.mean(hi - lo))
    return out


def _interval(draws2d: np.ndarray, level: float):
    return analysis.central_interval(draws2d, level)


# -- estimators ---------------------------------------------------------------

def _resolve_backend(name):
    if name is None:
        return kernels.default_backend()
    return kernels.available_backends()[name]


def _lbcf_dgp1(inst: Dgp1Instance, cfg: dict) -> dict:
    tf, ef = inst.train_frame(), inst.test_frame()
    method = cfg.get("propensity", "probit_forest")
    if cfg.get("true_propensity"):
        tf["pi.2"] = inst.p[:inst.n_train]
        ef["pi.2"] = inst.p[inst.n_train:]
        method = "supplied"
    train = from_frame(tf)
    test = from_frame(ef)
    dr = sampler.fit(train, cfg.get("hp") or Hyperparams(),
                     propensity=method, seed=cfg["seed"], test=test,
                     keep_forests=False, n_chains=cfg.get("n_chains", 1),
                     backend=_resolve_backend(cfg.get("backend")))
    level = cfg.get("level", 0.95)
    out = {}
    for kind in ("delta", "tau"):
        s = dr.fit_test[kind][2]
        lo, hi = _interval(s, level)
        out[kind] = {"mean": s.mean(axis=0), "lo": lo, "hi": hi}
    ate = analysis.ate_posterior(dr, 2, dataset="test")
    alo, ahi = np.quantile(ate, [(1 - level) / 2, (1 + level) / 2])
    out["ate"] = {"est": float(ate.mean()), "lo": float(alo),
                  "hi": float(ahi)}
    return out


def _bart_diff_dgp1(inst: Dgp1Instance, cfg: dict) -> dict:
    """Single 200-tree forest on the differenced outcome, Z as a covariate."""
    ntr = inst.n_train
    hp = cfg.get("hp") or Hyperparams()
    Xtr = np.column_stack([inst.X[:ntr], inst.y1[:ntr], inst.z[:ntr]])
    dy = inst.y2[:ntr] - inst.y1[:ntr]
    m, s = dy.mean(), dy.std(ddof=1)
    Xte = np.column_stack([inst.X[ntr:], inst.y1[ntr:]])
    X0 = np.column_stack([Xte, np.zeros(len(Xte))])
    X1 = np.column_stack([Xte, np.ones(len(Xte))])
    params = ForestParams(200, 1.0 / 200.0, 0.95, 2.0, hp.min_leaf,
                          hp.probs())
    reg = fit_forest_regression(
        (Xtr + 0.0), (dy - m) / s, params, n_burn=hp.n_burn,
        n_save=hp.n_save, nu=hp.nu, lam=hp.lam,
        rng=np.random.default_rng(np.random.SeedSequence(cfg["seed"])),
        X_test=np.vstack([X0, X1]) + 0.0, keep_snapshots=False,
        backend=_resolve_backend(cfg.get("backend")))
    n_te = len(Xte)
    pred0 = m + s * reg.test_fit[:, :n_te]
    pred1 = m + s * reg.test_fit[:, n_te:]
    level = cfg.get("level", 0.95)
    out = {}
    for kind, draws2d in (("delta", pred0), ("tau", pred1 - pred0)):
        lo, hi = _interval(draws2d, level)
        out[kind] = {"mean": draws2d.mean(axis=0), "lo": lo, "hi": hi}
    ate = (pred1 - pred0).mean(axis=1)
    alo, ahi = np.quantile(ate, [(1 - level) / 2, (1 + level) / 2])
    out["ate"] = {"est": float(ate.mean()), "lo": float(alo),
                  "hi": float(ahi)}
    return out


def _lbcf_dgp2(inst: Dgp2Instance, cfg: dict) -> dict:
    train = from_frame(inst.frame())
    if cfg.get("true_propensity"):
        raise ValueError("true-propensity mode applies to dgp1 only")
    dr = sampler.fit(train, cfg.get("hp") or Hyperparams(),
                     propensity=cfg.get("propensity", "probit_forest"),
                     seed=cfg["seed"], keep_forests=False,
                     n_chains=cfg.get("n_chains", 1),
                     backend=_resolve_backend(cfg.get("backend")))
    level = cfg.get("level", 0.95)
    out = {}
    for w in (2, 3):
        s = analysis.ate_posterior(dr, w, dataset="train")
        lo, hi = np.quantile(s, [(1 - level) / 2, (1 + level) / 2])
        out[w] = {"est": float(s.mean()), "lo": float(lo), "hi": float(hi)}
    return out


DGP1_ESTIMATORS = {"lbcf": _lbcf_dgp1, "bart_diff": _bart_diff_dgp1}
DGP2_ESTIMATORS = {"lbcf": _lbcf_dgp2}


# -- benchmark driver ---------------------------------------------------------

def _run_one(dgp: int, est: str, k: int, cfg: dict) -> dict:
    """One replication of one estimator; returns a flat record row."""
    rep_seed = cfg["seed"] ^ k
    rcfg = dict(cfg)
    rcfg["seed"] = rep_seed
    t0 = time.perf_counter()
    if dgp == 1:
        inst = gen_dgp1(cfg["n_train"], cfg["n_test"], cfg["sigma_dgp"],
                        rep_seed, cfg["null_tau"])
        res = DGP1_ESTIMATORS[est](inst, rcfg)
        te = slice(inst.n_train, None)
        md = evaluate_metrics(inst.delta[te], res["delta"]["mean"],
                              res["delta"]["lo"], res["delta"]["hi"])
        mt = evaluate_metrics(inst.tau[te], res["tau"]["mean"],
                              res["tau"]["lo"], res["tau"]["hi"])
        row = {"dgp": 1, "estimator": est, "rep": k, "seed": rep_seed,
               "rmse_delta": md["rmse"], "bias_delta": md["bias"],
               "cov_delta": md["coverage"], "width_delta": md["width"],
               "pehe_tau": mt["rmse"], "bias_tau": mt["bias"],
               "cov_tau": mt["coverage"], "width_tau": mt["width"],
               "ate_est": res["ate"]["est"], "ate_lo": res["ate"]["lo"],
               "ate_hi": res["ate"]["hi"],
               "ate_covers_zero": float(res["ate"]["lo"] <= 0.0
                                        <= res["ate"]["hi"])}
    elif dgp == 2:
        inst = gen_dgp2(cfg["n_train"], rep_seed)
        res = DGP2_ESTIMATORS[est](inst, rcfg)
        row = {"dgp": 2, "estimator": est, "rep": k, "seed": rep_seed}
        for w in (2, 3):
            truth = inst.ate[w]
            row[f"ate{w}_est"] = res[w]["est"]
            row[f"ate{w}_lo"] = res[w]["lo"]
            row[f"ate{w}_hi"] = res[w]["hi"]
            row[f"bias{w}"] = abs(res[w]["est"] - truth)
            row[f"cov{w}"] = float(res[w]["lo"] <= truth <= res[w]["hi"])
            row[f"width{w}"] = res[w]["hi"] - res[w]["lo"]
    else:
        raise ValueError("dgp must be 1 or 2")
    row["elapsed_s"] = time.perf_counter() - t0
    return row


_AGG_SKIP = ("dgp", "estimator", "rep", "seed")


def _aggregate(records: pd.DataFrame) -> dict:
    out = {}
    for est, grp in records.groupby("estimator"):
        cols = {}
        for col in grp.columns:
            if col in _AGG_SKIP:
                continue
            cols[col] = float(grp[col].mean())
        cols["n_reps"] = int(len(grp))
        out[est] = cols
    return out


def _format_table(dgp: int, agg: dict, cfg: dict) -> str:
    lines = [f"DGP{dgp} benchmark: {cfg['n_reps']} replications, "
             f"seed {cfg['seed']}"]
    if dgp == 1:
        lines[0] += (f", sigma_dgp={cfg['sigma_dgp']}, "
                     + ("true propensity" if cfg["true_propensity"]
                        else f"propensity={cfg['propensity']}"))
        ests = sorted(agg)
        header = ["metric"]
        for e in ests:
            header += [f"delta:{e}", f"tau:{e}"]
        rows = []
        for label, dkey, tkey in (
                ("RMSE/PEHE", "rmse_delta", "pehe_tau"),
                ("Mean Absolute Bias", "bias_delta", "bias_tau"),
                ("95% Coverage", "cov_delta", "cov_tau"),
                ("95% CI Width", "width_delta", "width_tau")):
            row = [label]
            for e in ests:
                row += [f"{agg[e][dkey]:.3f}", f"{agg[e][tkey]:.3f}"]
            rows.append(row)
    else:
        header = ["Model/Metric"]
        ests = sorted(agg)
        for e in ests:
            header += [f"{e} Wave 1-2", f"{e} Wave 2-3"]
        rows = []
        for label, key in (("Mean Absolute Bias", "bias"),
                           ("95% Coverage", "cov"),
                           ("Mean 95% CI Width", "width")):
            row = [label]
            for e in ests:
                row += [f"{agg[e][key + '2']:.3f}",
                        f"{agg[e][key + '3']:.3f}"]
            rows.append(row)
    widths = [max(len(r[j]) for r in [header] + rows)
              for j in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" if j == 0 else f"{{:>{w}}}"
                    for j, w in enumerate(widths))
    lines.append(fmt.format(*header))
    for r in rows:
        lines.append(fmt.format(*r))
    return "\n".join(lines) + "\n"


def run_benchmark(dgp: int, n_reps: int, estimators=("lbcf",), *,
                  seed: int = 0, out_dir=None, threads: int = 1,
                  hp: Hyperparams | None = None, sigma_dgp: float = 1.0,
                  n_train: int = 500, n_test: int = 1000,
                  null_tau: bool = False, propensity: str = "probit_forest",
                  true_propensity: bool = False, backend_name=None,
                  level: float = 0.95, n_chains: int = 1,
                  progress=None) -> dict:
    """Run (or resume) a replicated benchmark and aggregate its records.

    Per-replication rows are appended to ``out_dir/records.csv`` as soon as
    they finish, so an interrupted run continues where it stopped. The
    aggregate report is written as JSON plus a formatted text table.
    """
    registry = DGP1_ESTIMATORS if dgp == 1 else DGP2_ESTIMATORS
    for e in estimators:
        if e not in registry:
            raise ValueError(f"unknown estimator {e!r} for dgp{dgp}; "
                             f"choose from {sorted(registry)}")
    cfg = {"dgp": dgp, "n_reps": n_reps, "seed": seed, "n_train": n_train,
           "n_test": n_test, "sigma_dgp": sigma_dgp, "null_tau": null_tau,
           "propensity": propensity, "true_propensity": true_propensity,
           "backend": backend_name, "level": level, "hp": hp,
           "n_chains": n_chains, "estimators": list(estimators)}

    done = set()
    rec_path = None
    old = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        rec_path = os.path.join(out_dir, "records.csv")
        if os.path.exists(rec_path):
            old = pd.read_csv(rec_path)
            old = old[old["dgp"] == dgp]
            done = {(r["estimator"], int(r["rep"]))
                    for _, r in old.iterrows()}

    jobs = [(est, k) for est in estimators for k in range(1, n_reps + 1)
            if (est, k) not in done]
    rows = [] if old is None else old.to_dict("records")

    def _record(row):
        rows.append(row)
        if rec_path is not None:
            df = pd.DataFrame([row])
            new_file = not os.path.exists(rec_path)
            df.to_csv(rec_path, mode="a", header=new_file, index=False)
        if progress is not None:
            print(f"[dgp{dgp}] {row['estimator']} rep {row['rep']}"
                  f"/{n_reps} done in {row['elapsed_s']:.1f}s",
                  file=progress)

    if threads <= 1:
        for est, k in jobs:
            _record(_run_one(dgp, est, k, cfg))
    else:
        from concurrent.futures import ProcessPoolExecutor, as_completed
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futs = {pool.submit(_run_one, dgp, est, k, cfg): (est, k)
                    for est, k in jobs}
            for fut in as_completed(futs):
                _record(fut.result())

    records = pd.DataFrame(rows)
    keep = records[(records["dgp"] == dgp)
                   & records["estimator"].isin(estimators)
                   & (records["rep"] <= n_reps)]
    agg = _aggregate(keep)
    cfg_echo = dict(cfg)
    cfg_echo["hp"] = (hp or Hyperparams()).resolved()
    report = {"dgp": dgp, "config": cfg_echo, "aggregate": agg,
              "package_version": __version__}
    if out_dir is not None:
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
        with open(os.path.join(out_dir, "table.txt"), "w") as fh:
            fh.write(_format_table(dgp, agg, cfg))
    return report
