"""Panel data ingestion, validation, and outcome standardization.

Wide CSV convention, one row per subject:

- ``y.<t>``       outcome at wave t (t = 1..T); empty cell = not observed
- ``z.<w>``       treatment switched on between waves w-1 and w (w = 2..T);
                  values 0/1, empty = missing (imputed during sampling when
                  the subject is observed at wave w)
- ``x.<name>.<w>``  covariate first available at wave w; string-valued
                  columns are treated as categorical and one-hot encoded
- ``pv.<k>.y.<t>``  optional plausible-value realizations of the outcomes
- ``weight``      optional nonnegative survey weight (default 1)
- ``id``          optional subject identifier (default row number)

Dropout must be monotone: y observed at wave t implies y observed at t-1.
"""

from __future__ import annotations

import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

_Y_RE = re.compile(r"^y\.(\d+)$")
_Z_RE = re.compile(r"^z\.(\d+)$")
_X_RE = re.compile(r"^x\.(.+)\.(\d+)$")
_PV_RE = re.compile(r"^pv\.(\d+)\.y\.(\d+)$")
_PI_RE = re.compile(r"^pi\.(\d+)$")


class DataError(ValueError):
    """Raised for malformed input data."""


@dataclass(frozen=True)
class Feature:
    """One column of the expanded design matrix."""
    name: str           # design name, e.g. "x.age.1" or "x.region.1=west"
    wave: int           # wave tag (availability time)
    source: str         # source CSV column
    level: str | None = None  # one-hot level, None for numeric


@dataclass
class PanelData:
    """Validated wide-format panel."""
    ids: list
    T: int
    y: np.ndarray                # (n, T) float64, NaN = unobserved
    z: np.ndarray                # (n, T-1) float64 in {0, 1, NaN}; col j = wave j+2
    X: np.ndarray                # (n, P) float64, one-hot expanded, NaN = missing
    features: list[Feature]
    weights: np.ndarray          # (n,)
    pv: np.ndarray | None = None  # (m, n, T)
    pi: np.ndarray | None = None  # (n, T-1) supplied propensity scores
    levels: dict = field(default_factory=dict)  # source col -> sorted level list

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_pv(self) -> int:
        return 0 if self.pv is None else self.pv.shape[0]

    def observed(self) -> np.ndarray:
        """(n, T) bool mask of observed outcomes."""
        return ~np.isnan(self.y)

    def n_waves_observed(self) -> np.ndarray:
        """Number of observed waves per subject (monotone, so a prefix)."""
        return self.observed().sum(axis=1).astype(np.int64)

    def present(self, w: int) -> np.ndarray:
        """Bool mask of subjects observed at wave w (1-based)."""
        return ~np.isnan(self.y[:, w - 1])

    def feature_index(self) -> dict:
        return {f.name: j for j, f in enumerate(self.features)}

    def schema_signature(self) -> dict:
        """Column-level schema (no values); equality required at predict."""
        return {
            "T": self.T,
            "features": [[f.name, f.wave, f.source, f.level]
                         for f in self.features],
            "levels": {k: list(v) for k, v in sorted(self.levels.items())},
        }

    def validate(self) -> None:
        n, T = self.y.shape
        if T < 1:
            raise DataError("no outcome columns")
        if self.z.shape != (n, T - 1):
            raise DataError("treatment matrix shape mismatch")
        if not np.all(np.isnan(self.z) | (self.z == 0.0) | (self.z == 1.0)):
            raise DataError("treatment values must be 0, 1, or missing")
        if np.isinf(self.y).any():
            raise DataError("outcomes must be finite or missing")
        if np.isinf(self.X).any():
            raise DataError("covariates must be finite or missing")
        if (~np.isfinite(self.weights)).any() or (self.weights < 0).any():
            raise DataError("weights must be finite and nonnegative")
        obs = self.observed()
        if not obs.any(axis=1).all():
            bad = [self.ids[i] for i in np.nonzero(~obs.any(axis=1))[0][:5]]
            raise DataError(f"subjects with no observed outcomes: {bad}")
        # monotone dropout: observed waves form a prefix
        if T > 1 and (obs[:, 1:] & ~obs[:, :-1]).any():
            i = int(np.nonzero((obs[:, 1:] & ~obs[:, :-1]).any(axis=1))[0][0])
            raise DataError(
                f"non-monotone dropout for subject {self.ids[i]}: a wave is "
                "observed after a missing one")
        if self.pi is not None:
            if self.pi.shape != (n, T - 1):
                raise DataError("supplied propensity score shape mismatch")
            vals = self.pi[~np.isnan(self.pi)]
            if ((vals <= 0) | (vals >= 1)).any():
                raise DataError("supplied propensity scores must lie in (0, 1)")
        if self.pv is not None:
            if self.pv.shape[1:] != (n, T):
                raise DataError("plausible-value array shape mismatch")
            for k in range(self.pv.shape[0]):
                if not np.array_equal(np.isnan(self.pv[k]), ~obs):
                    raise DataError(
                        f"plausible value set {k + 1} has a different "
                        "missingness pattern than y")


def _is_numeric(series: pd.Series) -> bool:
    if pd.api.types.is_numeric_dtype(series):
        return True
    # strings that all parse as floats count as numeric
    vals = series.dropna().astype(str)
    try:
        vals.map(float)
        return True
    except ValueError:
        return False


def load_csv(path, levels: dict | None = None) -> PanelData:
    """Read a wide-format panel CSV.

    ``levels`` supplies fixed categorical level maps (from a fitted model);
    categories absent from the map produce an all-zero one-hot row and a
    warning. Without it, levels are the sorted distinct observed values.
    """
    df = pd.read_csv(path, float_precision="round_trip", dtype=None)
    return from_frame(df, levels=levels)


def from_frame(df: pd.DataFrame, levels: dict | None = None) -> PanelData:
    cols = list(df.columns)
    y_waves, z_waves, x_cols, pv_keys, pi_waves = {}, {}, [], {}, {}
    ids = None
    weights = None
    for col in cols:
        if col == "id":
            ids = df[col].tolist()
            counts = Counter(str(v) for v in ids)
            dupes = sorted(v for v, c in counts.items() if c > 1)
            if dupes:
                raise DataError(f"duplicate subject ids: {dupes[:5]}")
            continue
        if col == "weight":
            weights = pd.to_numeric(df[col]).to_numpy(dtype=np.float64)
            continue
        m = _Y_RE.match(col)
        if m:
            y_waves[int(m.group(1))] = col
            continue
        m = _Z_RE.match(col)
        if m:
            z_waves[int(m.group(1))] = col
            continue
        m = _PV_RE.match(col)
        if m:
            pv_keys[(int(m.group(1)), int(m.group(2)))] = col
            continue
        m = _PI_RE.match(col)
        if m:
            pi_waves[int(m.group(1))] = col
            continue
        m = _X_RE.match(col)
        if m:
            x_cols.append((m.group(1), int(m.group(2)), col))
            continue
        raise DataError(f"unrecognized column {col!r}")

    if not y_waves:
        raise DataError("no y.<t> columns found")
    T = max(y_waves)
    if sorted(y_waves) != list(range(1, T + 1)):
        raise DataError(f"outcome columns must be y.1..y.{T} with no gaps")
    for w in z_waves:
        if w < 2 or w > T:
            raise DataError(f"treatment column z.{w} outside waves 2..{T}")

    n = len(df)
    y = np.full((n, T), np.nan)
    for t, col in y_waves.items():
        y[:, t - 1] = pd.to_numeric(df[col]).to_numpy(dtype=np.float64)
    z = np.full((n, max(T - 1, 0)), np.nan)
    for w, col in z_waves.items():
        z[:, w - 2] = pd.to_numeric(df[col]).to_numpy(dtype=np.float64)
    pi = None
    if pi_waves:
        pi = np.full((n, max(T - 1, 0)), np.nan)
        for w, col in pi_waves.items():
            if w < 2 or w > T:
                raise DataError(f"propensity column pi.{w} outside waves 2..{T}")
            pi[:, w - 2] = pd.to_numeric(df[col]).to_numpy(dtype=np.float64)

    # covariates, expanded; order = file order, one-hot levels sorted
    feats: list[Feature] = []
    blocks: list[np.ndarray] = []
    level_map = dict(levels) if levels else {}
    for name, wave, col in x_cols:
        s = df[col]
        if _is_numeric(s) and col not in level_map:
            v = pd.to_numeric(s).to_numpy(dtype=np.float64)
            feats.append(Feature(col, wave, col))
            blocks.append(v.reshape(-1, 1))
        else:
            vals = s.astype("string")
            if col in level_map:
                lv = list(level_map[col])
                seen = set(vals.dropna().tolist())
                unseen = sorted(seen - set(lv))
                if unseen:
                    warnings.warn(
                        f"column {col!r}: categories {unseen} not seen at fit "
                        "time; their rows are encoded as all zeros")
            else:
                lv = sorted(vals.dropna().unique().tolist())
                level_map[col] = lv
            onehot = np.zeros((n, len(lv)))
            isna = vals.isna().to_numpy()
            onehot[isna] = np.nan  # missing category routes by missing rules
            for j, lev in enumerate(lv):
                # == on StringDtype yields NA for missing cells; treat as False
                hit = (vals == lev).fillna(False).to_numpy(dtype=bool)
                onehot[hit, j] = 1.0
                feats.append(Feature(f"{col}={lev}", wave, col, lev))
            blocks.append(onehot)
    X = (np.concatenate(blocks, axis=1) if blocks else np.zeros((n, 0)))
    X = X + 0.0  # normalize -0.0 so split values compare identically

    pv = None
    if pv_keys:
        ks = sorted({k for k, _ in pv_keys})
        if ks != list(range(1, len(ks) + 1)):
            raise DataError("plausible-value sets must be numbered 1..m")
        pv = np.full((len(ks), n, T), np.nan)
        for (k, t), col in pv_keys.items():
            if t < 1 or t > T:
                raise DataError(f"plausible-value column {col} outside waves")
            pv[k - 1, :, t - 1] = pd.to_numeric(df[col]).to_numpy(np.float64)

    data = PanelData(
        ids=ids if ids is not None else list(range(n)),
        T=T,
        y=y + 0.0,
        z=z + 0.0,
        X=X,
        features=feats,
        weights=(weights if weights is not None else np.ones(n)),
        pv=None if pv is None else pv + 0.0,
        pi=None if pi is None else pi + 0.0,
        levels=level_map,
    )
    data.validate()
    return data


def to_frame(data: PanelData) -> pd.DataFrame:
    """Inverse of from_frame; numeric values survive a round trip exactly."""
    out = {"id": data.ids}
    for t in range(1, data.T + 1):
        out[f"y.{t}"] = data.y[:, t - 1]
    for w in range(2, data.T + 1):
        out[f"z.{w}"] = data.z[:, w - 2]
    emitted = set()
    for j, f in enumerate(data.features):
        if f.source in emitted:
            continue
        if f.level is None:
            out[f.source] = data.X[:, j]
            emitted.add(f.source)
        else:
            # reassemble the categorical column from its one-hot block
            idxs = [(k, g.level) for k, g in enumerate(data.features)
                    if g.source == f.source]
            col = np.full(data.n, None, dtype=object)
            for k, lev in idxs:
                col[data.X[:, k] == 1.0] = lev
            miss = np.isnan(data.X[:, j])
            col[miss] = None
            out[f.source] = col
            emitted.add(f.source)
    if data.pv is not None:
        for k in range(data.n_pv):
            for t in range(1, data.T + 1):
                out[f"pv.{k + 1}.y.{t}"] = data.pv[k, :, t - 1]
    if data.pi is not None:
        for w in range(2, data.T + 1):
            out[f"pi.{w}"] = data.pi[:, w - 2]
    out["weight"] = data.weights
    return pd.DataFrame(out)


def save_csv(data: PanelData, path) -> None:
    to_frame(data).to_csv(path, index=False, na_rep="")


@dataclass(frozen=True)
class Standardizer:
    """Pooled-moment outcome standardizer; sd uses the sample convention."""
    mean: float
    sd: float

    def apply(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.sd

    def invert(self, y_std):
        return np.asarray(y_std, dtype=np.float64) * self.sd + self.mean


def make_standardizer(y: np.ndarray) -> Standardizer:
    """Pooled mean/sd over all observed outcome values (ddof=1)."""
    vals = np.asarray(y, dtype=np.float64)
    vals = vals[~np.isnan(vals)]
    if vals.size < 2:
        raise DataError("need at least two observed outcomes to standardize")
    sd = float(np.std(vals, ddof=1))
    if sd == 0.0 or not math.isfinite(sd):
        raise DataError("outcomes are constant; cannot standardize")
    return Standardizer(float(np.mean(vals)), sd)


def standardize_outcomes(data: PanelData) -> tuple[PanelData, Standardizer]:
    """Copy of the dataset with standardized outcomes, plus the transform."""
    std = make_standardizer(data.y)
    return replace(data, y=std.apply(data.y)), std


def plausible_value_views(data: PanelData) -> list[PanelData]:
    """One complete dataset per plausible-value set (y replaced, pv dropped)."""
    if data.pv is None:
        raise DataError("dataset has no plausible-value columns")
    views = []
    for k in range(data.n_pv):
        views.append(replace(data, y=data.pv[k].copy(), pv=None))
    for v in views:
        v.validate()
    return views
