"""Propensity estimation: MLE recovery, pass-through, clipping, invariance."""

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit, logit

from lbcf.data import DataError, from_frame
from lbcf.propensity import (CLIP_HI, CLIP_LO, PropensityModel, WaveModel,
                             estimate_propensity, fit_wave, propensity_design)

from conftest import make_panel_frame


def _two_wave_frame(y1, z2, y2=None, **extra):
    n = len(y1)
    cols = {"id": np.arange(n), "y.1": np.asarray(y1, dtype=float),
            "y.2": (np.zeros(n) if y2 is None else np.asarray(y2, float)),
            "z.2": np.asarray(z2, dtype=float)}
    cols.update(extra)
    return pd.DataFrame(cols)


def _irls(Xd, z, iters=60):
    """Plain Newton-Raphson logistic fit, independent of the package path."""
    b = np.zeros(Xd.shape[1])
    for _ in range(iters):
        mu = expit(Xd @ b)
        H = Xd.T @ (Xd * (mu * (1 - mu))[:, None])
        step = np.linalg.solve(H, Xd.T @ (z - mu))
        b = b + step
        if np.max(np.abs(step)) < 1e-12:
            break
    return b


def test_intercept_only_scores_are_sample_proportion():
    """Uninformative design, 30% treated: every fitted score is 0.3."""
    n = 40
    z = np.zeros(n)
    z[:12] = 1.0
    d = from_frame(_two_wave_frame(np.full(n, 5.0), z))
    model = estimate_propensity(d, "logistic")
    scores = model.scores(d)[:, 0]
    assert np.allclose(scores, 0.3, atol=1e-6)


def test_logistic_recovers_dgp2_style_coefficients():
    """Z ~ Bern(expit(1 + 0.1 L)): estimates within 3 SEs of the truth."""
    rng = np.random.default_rng(1905)
    n = 5000
    L = rng.normal(2.0, 1.5, size=n)
    z = (rng.random(n) < expit(1.0 + 0.1 * L)).astype(float)
    d = from_frame(_two_wave_frame(L, z))
    wm = fit_wave(d, 2, "logistic")
    assert wm.kind == "logistic"
    coef = wm.coef  # [intercept, beta_y1]

    Xd = np.column_stack([np.ones(n), L])
    ref = _irls(Xd, z)
    assert np.allclose(coef, ref, atol=1e-5)

    mu = expit(Xd @ coef)
    cov = np.linalg.inv(Xd.T @ (Xd * (mu * (1 - mu))[:, None]))
    se = np.sqrt(np.diag(cov))
    assert abs(coef[0] - 1.0) < 3 * se[0]
    assert abs(coef[1] - 0.1) < 3 * se[1]


def test_supplied_scores_pass_through_unchanged():
    rng = np.random.default_rng(3)
    n = 50
    pi = expit(rng.standard_normal(n))  # strictly inside the clip range? no:
    pi = np.clip(pi, 0.05, 0.95)        # keep inside so pass-through is exact
    z = (rng.random(n) < pi).astype(float)
    df = _two_wave_frame(rng.standard_normal(n), z)
    df["pi.2"] = pi
    d = from_frame(df)
    wm = fit_wave(d, 2, "supplied")
    assert np.array_equal(wm.train_scores, pi)
    assert np.array_equal(wm.predict(d), pi)


def test_supplied_scores_outside_unit_interval_rejected():
    df = _two_wave_frame([1.0, 2.0, 3.0, 4.0], [0, 1, 0, 1])
    df["pi.2"] = [0.2, 1.0, 0.3, 0.4]
    with pytest.raises(DataError, match=r"\(0, 1\)"):
        from_frame(df)


def test_supplied_scores_required_for_all_present_subjects():
    df = _two_wave_frame([1.0, 2.0, 3.0, 4.0], [0, 1, 0, 1])
    df["pi.2"] = [0.2, np.nan, 0.3, 0.4]
    d = from_frame(df)
    with pytest.raises(DataError, match="pi.2"):
        fit_wave(d, 2, "supplied")


def test_extreme_supplied_scores_are_clipped():
    df = _two_wave_frame([1.0, 2.0, 3.0, 4.0], [0, 1, 0, 1])
    df["pi.2"] = [1e-6, 0.5, 1 - 1e-6, 0.5]
    d = from_frame(df)
    wm = fit_wave(d, 2, "supplied")
    assert wm.train_scores[0] == CLIP_LO
    assert wm.train_scores[2] == CLIP_HI


def test_separated_logistic_saturates_to_clip_bounds():
    # perfect separation: the MLE diverges, predictions saturate, and the
    # clip keeps every score usable by the missing-Z Gibbs formula
    x = np.concatenate([np.linspace(-3, -0.5, 25), np.linspace(0.5, 3, 25)])
    z = (x > 0).astype(float)
    d = from_frame(_two_wave_frame(x, z))
    wm = fit_wave(d, 2, "logistic")
    s = wm.predict(d)
    assert s.min() == CLIP_LO and s.max() == CLIP_HI


def test_constant_treatment_is_overlap_error():
    d = from_frame(_two_wave_frame([1.0, 2.0, 3.0], [1, 1, 1]))
    with pytest.raises(DataError, match="no overlap"):
        fit_wave(d, 2, "logistic")


def test_row_order_invariance_logistic():
    rng = np.random.default_rng(8)
    n = 200
    x = rng.standard_normal(n)
    z = (rng.random(n) < expit(x)).astype(float)
    df = _two_wave_frame(x, z)
    d = from_frame(df)
    perm = rng.permutation(n)
    d_perm = from_frame(df.iloc[perm].reset_index(drop=True))
    s = estimate_propensity(d, "logistic").scores(d)[:, 0]
    s_perm = estimate_propensity(d_perm, "logistic").scores(d_perm)[:, 0]
    assert np.allclose(s[perm], s_perm, atol=1e-7)


def test_design_matrix_contents():
    df = make_panel_frame(n=20, T=3, seed=1)
    d = from_frame(df)
    X3, names = propensity_design(d, 3)
    assert names == ["x.a.1", "x.b.2", "y.1", "y.2", "z.2"]
    assert np.array_equal(X3[:, 2], d.y[:, 0])
    assert np.array_equal(X3[:, 4], d.z[:, 0])
    X2, names2 = propensity_design(d, 2)
    assert names2 == ["x.a.1", "x.b.2", "y.1"]


def test_logistic_mean_imputation_handles_missing_cells():
    rng = np.random.default_rng(10)
    n = 300
    x = rng.standard_normal(n)
    z = (rng.random(n) < expit(0.5 + x)).astype(float)
    df = _two_wave_frame(rng.standard_normal(n), z)
    df["x.c.1"] = x
    df.loc[rng.choice(n, 40, replace=False), "x.c.1"] = np.nan
    d = from_frame(df)
    wm = fit_wave(d, 2, "logistic")
    s = wm.predict(d)
    assert np.isfinite(s).all()
    # the informative covariate should still separate the arms on average
    assert s[z == 1].mean() > s[z == 0].mean() + 0.05


def test_probit_forest_deterministic_and_predictive():
    rng = np.random.default_rng(12)
    n = 300
    x = rng.standard_normal(n)
    z = (rng.random(n) < expit(1.5 * x)).astype(float)
    df = _two_wave_frame(rng.standard_normal(n), z)
    df["x.c.1"] = x
    d = from_frame(df)
    m1 = estimate_propensity(d, "probit_forest", seed=5)
    m2 = estimate_propensity(d, "probit_forest", seed=5)
    s1, s2 = m1.scores(d)[:, 0], m2.scores(d)[:, 0]
    assert np.array_equal(s1, s2)
    assert np.all((s1 >= CLIP_LO) & (s1 <= CLIP_HI))
    assert s1[z == 1].mean() > s1[z == 0].mean() + 0.1
    m3 = estimate_propensity(d, "probit_forest", seed=6)
    assert not np.array_equal(s1, m3.scores(d)[:, 0])


def test_probit_forest_scores_missing_treatment_rows():
    rng = np.random.default_rng(13)
    n = 120
    x = rng.standard_normal(n)
    z = (rng.random(n) < expit(x)).astype(float)
    df = _two_wave_frame(rng.standard_normal(n), z)
    df["x.c.1"] = x
    df.loc[:9, "z.2"] = np.nan  # scored, but not used for estimation
    d = from_frame(df)
    for method in ("logistic", "probit_forest"):
        s = estimate_propensity(d, method, seed=2).scores(d)[:, 0]
        assert np.isfinite(s[:10]).all()
        assert np.all((s >= CLIP_LO) & (s <= CLIP_HI))


def test_estimate_propensity_wave_coverage_and_errors():
    d = from_frame(make_panel_frame(n=30, T=3, seed=2))
    m = estimate_propensity(d, "logistic")
    assert sorted(m.waves) == [2, 3]
    assert m.scores(d).shape == (30, 2)
    with pytest.raises(ValueError, match="method"):
        estimate_propensity(d, "mystery")
    one_wave = from_frame(pd.DataFrame(
        {"id": [0, 1], "y.1": [1.0, 2.0]}))
    with pytest.raises(DataError, match="two waves"):
        estimate_propensity(one_wave, "logistic")


def test_wave_model_json_round_trip():
    rng = np.random.default_rng(21)
    n = 80
    x = rng.standard_normal(n)
    z = (rng.random(n) < expit(x)).astype(float)
    df = _two_wave_frame(x, z)
    d = from_frame(df)
    for method in ("logistic", "probit_forest"):
        m = estimate_propensity(d, method, seed=1)
        back = PropensityModel.from_jsonable(m.to_jsonable())
        assert np.array_equal(m.scores(d), back.scores(d))
