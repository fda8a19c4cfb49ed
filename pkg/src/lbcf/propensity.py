"""Per-wave treatment propensity models.

Three methods:

- ``logistic``: maximum-likelihood logistic regression on the wave's history
  design (missing cells mean-imputed with stored training means);
- ``probit_forest`` (default): a sum-of-trees probit via latent-normal
  augmentation with unit latent variance, scored as the posterior mean of
  the normal CDF of the forest fit;
- ``supplied``: user scores passed through unchanged (validated, then
  clipped like everything else).

The wave-w design is the Assumption-style history: covariates available by
wave w, prior outcomes y_1..y_{w-1}, and prior treatments z_2..z_{w-1}.
All scores are clipped to [0.001, 0.999] and held fixed during sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize
from scipy.special import expit, ndtr, ndtri

from . import _engine
from .data import DataError, PanelData
from .trees import MoveProbs

CLIP_LO, CLIP_HI = 0.001, 0.999

METHODS = ("logistic", "probit_forest", "supplied")


def clip_scores(p) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), CLIP_LO, CLIP_HI)


def propensity_design(data: PanelData, w: int) -> tuple[np.ndarray, list[str]]:
    """History design for treatment at wave w (all subjects as rows)."""
    cols = [j for j, f in enumerate(data.features) if f.wave <= w]
    parts = [data.X[:, cols]]
    names = [data.features[j].name for j in cols]
    for t in range(1, w):
        parts.append(data.y[:, t - 1:t])
        names.append(f"y.{t}")
    for v in range(2, w):
        parts.append(data.z[:, v - 2:v - 1])
        names.append(f"z.{v}")
    return np.concatenate(parts, axis=1), names


@dataclass
class WaveModel:
    wave: int
    kind: str                      # logistic / probit_forest / supplied / constant
    coef: np.ndarray | None = None       # logistic: [intercept, betas]
    means: np.ndarray | None = None      # logistic: training feature means
    snapshots: list | None = None        # probit forest: per-draw stacked forests
    value: float | None = None           # constant wave
    train_scores: np.ndarray | None = None  # supplied / cached scores (all rows)

    def predict(self, data: PanelData) -> np.ndarray:
        if self.kind == "constant":
            return np.full(data.n, self.value)
        if self.kind == "supplied":
            if data.pi is None or np.isnan(data.pi[:, self.wave - 2]).all():
                raise DataError(
                    f"supplied-propensity model needs a pi.{self.wave} column "
                    "in new data")
            return clip_scores(data.pi[:, self.wave - 2])
        X, _ = propensity_design(data, self.wave)
        if self.kind == "logistic":
            X = _impute(X, self.means)
            eta = self.coef[0] + X @ self.coef[1:]
            return clip_scores(expit(eta))
        # probit forest: posterior mean of ndtr over saved draws
        acc = np.zeros(data.n)
        for snap in self.snapshots:
            acc += ndtr(_engine.predict_snapshot(snap, X))
        return clip_scores(acc / len(self.snapshots))

    def to_jsonable(self) -> dict:
        out = {"wave": self.wave, "kind": self.kind}
        if self.coef is not None:
            out["coef"] = self.coef.tolist()
            out["means"] = self.means.tolist()
        if self.snapshots is not None:
            out["snapshots"] = [_engine.snapshot_to_jsonable(s)
                                for s in self.snapshots]
        if self.value is not None:
            out["value"] = self.value
        if self.train_scores is not None:
            out["train_scores"] = self.train_scores.tolist()
        return out

    @classmethod
    def from_jsonable(cls, obj: dict) -> "WaveModel":
        return cls(
            wave=obj["wave"],
            kind=obj["kind"],
            coef=None if "coef" not in obj else np.asarray(obj["coef"]),
            means=None if "means" not in obj else np.asarray(obj["means"]),
            snapshots=None if "snapshots" not in obj else [
                _engine.snapshot_from_jsonable(s) for s in obj["snapshots"]],
            value=obj.get("value"),
            train_scores=None if "train_scores" not in obj else
            np.asarray(obj["train_scores"]),
        )


@dataclass
class PropensityModel:
    method: str
    waves: dict  # wave -> WaveModel

    def scores(self, data: PanelData) -> np.ndarray:
        """(n, T-1) score matrix for waves 2..T present in the model."""
        out = np.full((data.n, data.T - 1), np.nan)
        for w, wm in self.waves.items():
            out[:, w - 2] = wm.predict(data)
        return out

    def to_jsonable(self) -> dict:
        return {"method": self.method,
                "waves": {str(w): wm.to_jsonable()
                          for w, wm in sorted(self.waves.items())}}

    @classmethod
    def from_jsonable(cls, obj: dict) -> "PropensityModel":
        return cls(method=obj["method"],
                   waves={int(w): WaveModel.from_jsonable(wm)
                          for w, wm in obj["waves"].items()})


def _impute(X: np.ndarray, means: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64).copy()
    miss = np.isnan(X)
    if miss.any():
        X[miss] = np.broadcast_to(means, X.shape)[miss]
    return X


def _logistic_mle(X: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Unpenalized logistic MLE with analytic gradient; returns [b0, betas]."""
    n, p = X.shape
    Xd = np.concatenate([np.ones((n, 1)), X], axis=1)

    def nll(b):
        eta = Xd @ b
        # log(1 + exp(eta)) - z*eta, stably
        val = np.logaddexp(0.0, eta) - z * eta
        return float(val.sum())

    def grad(b):
        mu = expit(Xd @ b)
        return Xd.T @ (mu - z)

    res = scipy.optimize.minimize(nll, np.zeros(p + 1), jac=grad,
                                  method="L-BFGS-B",
                                  options={"maxiter": 500, "ftol": 1e-12,
                                           "gtol": 1e-8})
    return res.x


def fit_wave(data: PanelData, w: int, method: str,
             rng: np.random.Generator | None = None, *,
             n_trees: int = 50, n_burn: int = 100, n_save: int = 100,
             backend=None) -> WaveModel:
    """Fit one wave's propensity model on subjects with observed treatment."""
    present = data.present(w)
    zcol = data.z[:, w - 2]
    trainable = present & ~np.isnan(zcol)
    if not trainable.any():
        raise DataError(f"wave {w}: no observed treatment indicators")
    zvals = zcol[trainable]
    if (zvals == zvals[0]).all():
        raise DataError(
            f"wave {w}: every observed subject is "
            f"{'treated' if zvals[0] == 1 else 'untreated'} (no overlap)")

    if method == "supplied":
        if data.pi is None or np.isnan(data.pi[present, w - 2]).any():
            raise DataError(
                f"supplied propensity requires pi.{w} values for every "
                "subject observed at that wave")
        return WaveModel(w, "supplied",
                         train_scores=clip_scores(data.pi[:, w - 2]))

    X_all, _ = propensity_design(data, w)
    rows = np.nonzero(trainable)[0]

    if method == "logistic":
        means = np.nanmean(X_all[rows], axis=0)
        means = np.where(np.isnan(means), 0.0, means)
        Xtr = _impute(X_all[rows], means)
        coef = _logistic_mle(Xtr, zvals)
        return WaveModel(w, "logistic", coef=coef, means=means)

    if method != "probit_forest":
        raise ValueError(f"unknown propensity method {method!r}")
    if rng is None:
        rng = np.random.default_rng(0)

    params = _engine.ForestParams(n_trees=n_trees, leaf_var=1.0 / n_trees,
                                  alpha=0.95, beta=2.0, min_leaf=5,
                                  probs=MoveProbs())
    n_train = len(rows)
    obs_idx = np.arange(n_train, dtype=np.int64)
    obs_row = rows.astype(np.int32)
    c = np.zeros(data.n)
    c[rows] = 1.0
    block = _engine.ForestBlock(f"pi.{w}", X_all, params, obs_idx, obs_row, c,
                                backend=backend)
    zt = zvals.astype(np.float64)
    lat = np.zeros(n_train)      # latent normals
    r = np.zeros(n_train)        # residuals: latent - fit (fit starts at 0)
    snaps, acc = [], np.zeros(data.n)
    for it in range(n_burn + n_save):
        fit_all = block.fit_rows()
        fit_tr = fit_all[rows]
        u = rng.random(n_train)
        f0 = ndtr(-fit_tr)  # P(latent <= 0)
        q = np.where(zt == 1.0, f0 + u * (1.0 - f0), u * f0)
        q = np.clip(q, 1e-300, 1.0 - 1e-16)
        lat_new = fit_tr + ndtri(q)
        r += lat_new - lat
        lat = lat_new
        block.sweep(r, 1.0, rng)
        if it >= n_burn:
            snaps.append(block.snapshot())
            acc += ndtr(block.fit_rows())
    return WaveModel(w, "probit_forest", snapshots=snaps,
                     train_scores=clip_scores(acc / n_save))


def estimate_propensity(data: PanelData, method: str = "probit_forest",
                        seed: int = 0, backend=None, **kw) -> PropensityModel:
    """Fit propensity models for every wave 2..T.

    Errors if any wave has constant observed treatment (no overlap); the
    joint sampler handles those waves itself rather than through this entry
    point.
    """
    if method not in METHODS:
        raise ValueError(f"propensity method must be one of {METHODS}")
    if data.T < 2:
        raise DataError("propensity estimation needs at least two waves")
    root = np.random.SeedSequence(seed)
    waves = {}
    for w, ss in zip(range(2, data.T + 1), root.spawn(data.T - 1)):
        waves[w] = fit_wave(data, w, method, np.random.default_rng(ss),
                            backend=backend, **kw)
    return PropensityModel(method, waves)
