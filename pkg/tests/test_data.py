"""Panel ingestion, validation, and round-trip fidelity."""

import numpy as np
import pandas as pd
import pytest

from lbcf.data import (DataError, from_frame, load_csv, make_standardizer,
                       plausible_value_views, save_csv, standardize_outcomes,
                       to_frame)

from conftest import make_panel_frame


# -- parsing and validation ----------------------------------------------------

def test_parses_small_panel(small_panel):
    d = small_panel
    assert d.T == 3
    assert d.n == 40
    assert d.y.shape == (40, 3)
    assert d.z.shape == (40, 2)
    names = [f.name for f in d.features]
    assert names == ["x.a.1", "x.b.2"]
    assert [f.wave for f in d.features] == [1, 2]
    assert np.all(d.weights == 1.0)


def test_unrecognized_column_rejected():
    df = make_panel_frame()
    df["bogus"] = 1.0
    with pytest.raises(DataError, match="unrecognized column"):
        from_frame(df)


def test_outcome_gap_rejected():
    df = make_panel_frame().drop(columns=["y.2"])
    with pytest.raises(DataError, match="no gaps"):
        from_frame(df)


def test_treatment_wave_out_of_range():
    df = make_panel_frame()
    df["z.4"] = 0.0  # T = 3, so waves run 2..3
    with pytest.raises(DataError, match="z.4"):
        from_frame(df)


def test_duplicate_ids_rejected():
    df = make_panel_frame()
    df.loc[1, "id"] = df.loc[0, "id"]
    with pytest.raises(DataError, match="duplicate subject ids"):
        from_frame(df)


def test_nonbinary_treatment_rejected():
    df = make_panel_frame()
    df.loc[0, "z.2"] = 2.0
    with pytest.raises(DataError, match="0, 1, or missing"):
        from_frame(df)


def test_infinite_outcome_rejected():
    df = make_panel_frame()
    df.loc[0, "y.1"] = np.inf
    with pytest.raises(DataError, match="finite"):
        from_frame(df)


def test_monotone_dropout_enforced():
    df = make_panel_frame()
    df.loc[3, "y.2"] = np.nan  # y.3 still observed: a hole, not dropout
    with pytest.raises(DataError, match="non-monotone"):
        from_frame(df)


def test_dropout_tail_is_allowed():
    d = from_frame(make_panel_frame(dropout=6))
    assert d.present(3).sum() == 34
    assert sorted(set(d.n_waves_observed())) == [2, 3]


def test_all_missing_subject_rejected():
    df = make_panel_frame(T=2)
    df.loc[2, ["y.1", "y.2"]] = np.nan
    with pytest.raises(DataError, match="no observed outcomes"):
        from_frame(df)


def test_negative_weight_rejected():
    df = make_panel_frame()
    df["weight"] = 1.0
    df.loc[0, "weight"] = -0.5
    with pytest.raises(DataError, match="weights"):
        from_frame(df)


def test_supplied_propensity_bounds():
    df = make_panel_frame()
    df["pi.2"] = 0.4
    d = from_frame(df)
    assert d.pi is not None
    assert np.allclose(d.pi[:, 0], 0.4)
    assert np.isnan(d.pi[:, 1]).all()
    df.loc[0, "pi.2"] = 1.0
    with pytest.raises(DataError, match=r"\(0, 1\)"):
        from_frame(df)


def test_missing_treatment_cells_pass_through():
    d = from_frame(make_panel_frame(missing_z=5))
    assert int(np.isnan(d.z[:, 1]).sum()) == 5


# -- standardization ----------------------------------------------------------

def test_standardizer_values_one_two_three():
    """Values {1, 2, 3} standardize to {-1, 0, 1}: mean 2, sample sd 1."""
    std = make_standardizer(np.array([1.0, 2.0, 3.0]))
    assert std.mean == 2.0
    assert std.sd == 1.0
    assert np.array_equal(std.apply([1.0, 2.0, 3.0]), [-1.0, 0.0, 1.0])


def test_standardizer_roundtrip():
    rng = np.random.default_rng(4)
    y = rng.standard_normal(100) * 3 + 7
    std = make_standardizer(y)
    assert np.allclose(std.invert(std.apply(y)), y, atol=1e-12)


def test_standardizer_constant_outcomes_error():
    with pytest.raises(DataError, match="constant"):
        make_standardizer(np.full(10, 3.25))


def test_standardizer_needs_two_values():
    with pytest.raises(DataError, match="two observed"):
        make_standardizer(np.array([1.0, np.nan]))


def test_standardize_outcomes_pools_waves_and_skips_nan():
    d = from_frame(make_panel_frame(dropout=4))
    ds, std = standardize_outcomes(d)
    vals = ds.y[~np.isnan(ds.y)]
    assert abs(vals.mean()) < 1e-12
    assert abs(np.std(vals, ddof=1) - 1.0) < 1e-12
    assert np.array_equal(np.isnan(ds.y), np.isnan(d.y))


# -- round trips ---------------------------------------------------------------

def test_frame_round_trip_lossless():
    df = make_panel_frame(missing_z=3, dropout=2)
    d1 = from_frame(df)
    d2 = from_frame(to_frame(d1))
    assert d1.ids == d2.ids
    for a, b in [(d1.y, d2.y), (d1.z, d2.z), (d1.X, d2.X)]:
        assert np.array_equal(a, b, equal_nan=True)
    assert [f.name for f in d1.features] == [f.name for f in d2.features]


def test_csv_round_trip_lossless(tmp_path):
    """Writing and re-reading a CSV reproduces every value bit for bit."""
    rng = np.random.default_rng(11)
    df = make_panel_frame(seed=5, missing_z=4, dropout=3)
    df["x.a.1"] = rng.standard_normal(len(df)) * 1e-7  # awkward magnitudes
    d1 = from_frame(df)
    p = tmp_path / "panel.csv"
    save_csv(d1, p)
    d2 = load_csv(p)
    assert np.array_equal(d1.y, d2.y, equal_nan=True)
    assert np.array_equal(d1.z, d2.z, equal_nan=True)
    assert np.array_equal(d1.X, d2.X, equal_nan=True)
    assert np.array_equal(d1.weights, d2.weights)
    assert d1.schema_signature() == d2.schema_signature()


def test_csv_round_trip_with_pv_and_pi(tmp_path):
    df = make_panel_frame(T=2)
    rng = np.random.default_rng(2)
    for k in (1, 2, 3):
        for t in (1, 2):
            df[f"pv.{k}.y.{t}"] = df[f"y.{t}"] + 0.01 * rng.standard_normal(
                len(df))
    df["pi.2"] = 0.3
    d1 = from_frame(df)
    p = tmp_path / "panel.csv"
    save_csv(d1, p)
    d2 = load_csv(p)
    assert np.array_equal(d1.pv, d2.pv, equal_nan=True)
    assert np.array_equal(d1.pi, d2.pi, equal_nan=True)


# -- categorical covariates ------------------------------------------------------

def _cat_frame(cats, seed=0):
    df = make_panel_frame(n=len(cats), T=2, seed=seed)
    df["x.region.1"] = cats
    return df


def test_one_hot_levels_sorted_and_stable():
    cats = ["west", "east", "north", "east", "west", "north"] * 5
    d = from_frame(_cat_frame(cats + ["east"] * 10))
    names = [f.name for f in d.features if f.source == "x.region.1"]
    assert names == ["x.region.1=east", "x.region.1=north", "x.region.1=west"]
    j = [f.name for f in d.features].index("x.region.1=east")
    assert d.X[1, j] == 1.0 and d.X[0, j] == 0.0
    # row order must not change the encoding of a given subject
    df2 = _cat_frame(cats + ["east"] * 10).iloc[::-1].reset_index(drop=True)
    d2 = from_frame(df2)
    assert d.levels == d2.levels
    assert np.array_equal(d.X[::-1][:, j], d2.X[:, j])


def test_one_hot_unseen_category_warns_and_zero_encodes():
    train = from_frame(_cat_frame(["a", "b"] * 10))
    df_new = _cat_frame(["a", "c"] * 10)
    with pytest.warns(UserWarning, match="not seen at fit"):
        d_new = from_frame(df_new, levels=train.levels)
    names = [f.name for f in d_new.features]
    assert names == [f.name for f in train.features]
    ja = names.index("x.region.1=a")
    jb = names.index("x.region.1=b")
    assert d_new.X[1, ja] == 0.0 and d_new.X[1, jb] == 0.0  # "c" row
    assert d_new.X[0, ja] == 1.0


def test_one_hot_missing_category_is_nan_block():
    cats = ["a", "b", None, "a"] * 5
    d = from_frame(_cat_frame(cats))
    block = [j for j, f in enumerate(d.features) if f.source == "x.region.1"]
    assert np.isnan(d.X[2, block]).all()
    assert not np.isnan(d.X[0, block]).any()


def test_categorical_round_trip():
    cats = ["a", "b", None, "a"] * 5
    d1 = from_frame(_cat_frame(cats))
    d2 = from_frame(to_frame(d1), levels=d1.levels)
    assert np.array_equal(d1.X, d2.X, equal_nan=True)
    assert d1.levels == d2.levels


# -- plausible values -----------------------------------------------------------

def _pv_frame(m, n=30, T=2, seed=3):
    df = make_panel_frame(n=n, T=T, seed=seed, dropout=4)
    rng = np.random.default_rng(seed + 1)
    for k in range(1, m + 1):
        for t in range(1, T + 1):
            col = df[f"y.{t}"].to_numpy() + 0.05 * rng.standard_normal(n)
            df[f"pv.{k}.y.{t}"] = col
    return df


def test_pv_views_m5():
    d = from_frame(_pv_frame(5))
    views = plausible_value_views(d)
    assert len(views) == 5
    for k, v in enumerate(views):
        assert v.pv is None
        assert np.array_equal(v.y, d.pv[k], equal_nan=True)
        assert np.array_equal(np.isnan(v.y), np.isnan(d.y))


def test_pv_views_m1():
    d = from_frame(_pv_frame(1))
    views = plausible_value_views(d)
    assert len(views) == 1
    assert np.array_equal(views[0].y, d.pv[0], equal_nan=True)


def test_pv_mask_mismatch_rejected():
    df = _pv_frame(2)
    row = df.index[df["y.2"].isna()][0]
    df.loc[row, "pv.1.y.2"] = 0.5  # imputed where y is missing: mask differs
    with pytest.raises(DataError, match="missingness pattern"):
        from_frame(df)


def test_pv_numbering_must_be_dense():
    df = _pv_frame(2).rename(columns={"pv.2.y.1": "pv.4.y.1",
                                      "pv.2.y.2": "pv.4.y.2"})
    with pytest.raises(DataError, match="numbered"):
        from_frame(df)


def test_pv_views_without_pv_columns_error(small_panel):
    with pytest.raises(DataError, match="no plausible-value"):
        plausible_value_views(small_panel)
