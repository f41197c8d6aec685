import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tbigan.data import (
    PmuStream, PreprocessStats, apply_preprocess, fit_preprocess, impute_missing, make_windows,
    read_csv, stack_windows, window_array, window_count, window_labels, write_csv,
)
from tbigan.errors import ConfigError, DataError


def stream_of(x, labels=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return PmuStream(np.arange(len(x)) / 30.0, x, labels)


# -- stream / CSV ------------------------------------------------------------
def test_stream_requires_increasing_timestamps():
    with pytest.raises(DataError):
        PmuStream([0.0, 0.0], np.zeros((2, 1)))
    with pytest.raises(DataError):
        PmuStream([0.0, 1.0], np.zeros((3, 1)))


def test_csv_round_trip_with_missing_and_labels(tmp_path):
    x = np.array([[1.5, np.nan], [2.0, 3.25], [np.nan, 1e5]])
    s = PmuStream([0.0, 0.5, 1.0], x, [0, 1, 0], ["a", "b"])
    p = tmp_path / "s.csv"
    write_csv(s, p)
    r = read_csv(p)
    assert r.feature_names == ["a", "b"]
    np.testing.assert_array_equal(np.isnan(r.features), np.isnan(x))
    np.testing.assert_array_equal(np.nan_to_num(r.features), np.nan_to_num(x))
    assert r.labels.tolist() == [False, True, False]


def test_csv_accepts_nan_literal(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("timestamp,f0,f1\n0,NaN,1\n1,2,\n")
    r = read_csv(p)
    assert np.isnan(r.features[0, 0]) and np.isnan(r.features[1, 1])
    assert r.labels is None


@pytest.mark.parametrize("text", ["time,f0\n0,1\n", "timestamp,f0,label\n0,1,2\n", "timestamp,f0\n0,abc\n"])
def test_csv_malformed(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataError):
        read_csv(p)


def test_csv_missing_file(tmp_path):
    with pytest.raises(DataError):
        read_csv(tmp_path / "nope.csv")


# -- imputation ----------------------------------------------------------------
def test_impute_examples():
    s = stream_of([1.0, np.nan, 3.0])
    stats = fit_preprocess(s)
    assert stats.impute_value[0] == 2.0
    np.testing.assert_array_equal(impute_missing(s, stats).features[:, 0], [1.0, 2.0, 3.0])
    clean = stream_of([[1.0, 2.0], [3.0, 4.0]])
    st_c = fit_preprocess(clean)
    np.testing.assert_array_equal(impute_missing(clean, st_c).features, clean.features)


def test_impute_sparse_mask_matches_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(loc=50, size=(20000, 5))
    mask = rng.random(x.shape) < 1e-4
    mask[0, 0] = True
    xm = np.where(mask, np.nan, x)
    stats = fit_preprocess(xm)
    out = impute_missing(xm, stats)
    assert not np.isnan(out).any()
    oracle = xm.copy()
    for j in range(x.shape[1]):
        col = xm[:, j]
        oracle[np.isnan(col), j] = col[~np.isnan(col)].sum() / (~np.isnan(col)).sum()
    np.testing.assert_allclose(out, oracle, rtol=1e-12)


def test_fit_rejects_mostly_missing_and_empty():
    x = np.ones((4, 2))
    x[:3, 1] = np.nan
    with pytest.raises(DataError):
        fit_preprocess(x)
    with pytest.raises(DataError):
        fit_preprocess(np.empty((0, 3)))


# -- selective log -------------------------------------------------------------
def test_log_flags_examples():
    rng = np.random.default_rng(1)
    n = 200
    x = np.column_stack([
        rng.uniform(1e5, 1e6, n),       # voltage magnitude
        rng.uniform(-np.pi, np.pi, n),  # angle
        60 + 0.01 * rng.normal(size=n), # frequency
    ])
    assert fit_preprocess(x).apply_log.tolist() == [True, False, False]


@pytest.mark.parametrize("lo,hi,expected", [
    (100.0, 5000.0, False),          # min exactly 100 is excluded
    (100.0000001, 5000.0, True),
    (500.0, 1000.0, False),          # max exactly 1000 is excluded
    (500.0, 1000.0000001, True),
    (-5.0, 1e6, False),
])
def test_log_rule_boundaries(lo, hi, expected):
    x = np.array([[lo], [0.5 * (lo + hi)], [hi]])
    assert bool(fit_preprocess(x).apply_log[0]) is expected


def test_log_rule_uses_raw_values_before_imputation():
    # the NaN would be filled with the mean, but the rule only looks at present values
    x = np.array([[150.0], [np.nan], [2000.0]])
    assert fit_preprocess(x).apply_log[0]


# -- standardization -----------------------------------------------------------
def test_apply_examples():
    x = np.array([[1.0, math.e - 1], [3.0, math.e**2 - 1]])
    stats = fit_preprocess(x)
    assert apply_preprocess(np.array([2.0, math.e - 1]), stats)[0] == 0.0
    # force the log flag on the second channel to check the two-point arithmetic
    stats.apply_log[:] = [False, True]
    stats.mean[1], stats.variance[1] = 1.5, 0.25
    out = apply_preprocess(x, stats)
    np.testing.assert_allclose(out[:, 1], [-1.0, 1.0], rtol=1e-12)


def test_training_columns_standardized():
    rng = np.random.default_rng(2)
    x = np.column_stack([rng.uniform(1e5, 1e6, 500), rng.normal(size=500), rng.exponential(size=500)])
    out = apply_preprocess(x, fit_preprocess(x))
    assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(out.var(axis=0) - 1) < 1e-6)


def test_zero_variance_column_divided_by_one():
    x = np.column_stack([np.full(10, 7.0), np.arange(10.0)])
    stats = fit_preprocess(x)
    assert stats.zero_variance.tolist() == [True, False]
    np.testing.assert_array_equal(apply_preprocess(x, stats)[:, 0], 0.0)


def test_preprocess_row_order_independent():
    rng = np.random.default_rng(3)
    x = rng.uniform(200, 5000, size=(50, 4))
    stats = fit_preprocess(x)
    perm = rng.permutation(50)
    np.testing.assert_array_equal(apply_preprocess(x, stats)[perm], apply_preprocess(x[perm], stats))


def test_stats_record_split_and_no_leakage():
    rng = np.random.default_rng(4)
    train = rng.normal(10, 1, size=(100, 3))
    test = rng.normal(20, 5, size=(100, 3))
    stats = fit_preprocess(train, split_id="train-2024")
    assert stats.split_id == "train-2024"
    before = stats.to_dict()
    apply_preprocess(test, stats)
    assert stats.to_dict() == before
    np.testing.assert_allclose(stats.mean, train.mean(axis=0), rtol=1e-12)
    assert not np.allclose(stats.mean, fit_preprocess(test).mean)


def test_negative_value_on_log_channel_clamped(caplog):
    stats = fit_preprocess(np.array([[200.0], [3000.0]]))
    out = apply_preprocess(np.array([[-5.0]]), stats)
    expected = (np.log1p(200.0) - stats.mean[0]) / stats.scale[0]
    assert out[0, 0] == pytest.approx(expected)
    assert "clamping" in caplog.text


def test_stats_json_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    stats = fit_preprocess(rng.uniform(200, 5000, size=(30, 3)))
    stats.save(tmp_path / "s.json")
    doc = json.loads((tmp_path / "s.json").read_text())
    assert set(doc["features"][0]) >= {"index", "mean", "variance", "apply_log", "impute_value"}
    back = PreprocessStats.load(tmp_path / "s.json")
    for k in ("mean", "variance", "apply_log", "impute_value", "train_min"):
        np.testing.assert_array_equal(getattr(back, k), getattr(stats, k))


def test_feature_count_mismatch():
    stats = fit_preprocess(np.ones((3, 2)) * np.arange(3)[:, None])
    with pytest.raises(DataError):
        apply_preprocess(np.ones((2, 3)), stats)


# -- windowing -----------------------------------------------------------------
def test_window_examples():
    ws = make_windows(stream_of(np.arange(10.0)), T=4, stride=2)
    assert [w.start_index for w in ws] == [0, 2, 4, 6]
    assert not any(w.label for w in ws)
    labels = np.zeros(10, dtype=bool)
    labels[5] = True
    ws = make_windows(stream_of(np.arange(10.0), labels), T=4, stride=1)
    assert [w.start_index for w in ws if w.label] == [2, 3, 4, 5]


def test_short_stream_gives_no_windows(caplog):
    assert make_windows(stream_of(np.arange(3.0)), T=4, stride=1) == []
    assert "shorter" in caplog.text
    assert stack_windows([]).shape == (0, 0, 0)


def test_bad_window_args():
    with pytest.raises(ConfigError):
        make_windows(stream_of(np.arange(10.0)), T=0, stride=1)
    with pytest.raises(ConfigError):
        window_array(np.zeros((5, 1)), 2, 0)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(0, 60), T=st.integers(1, 12), stride=st.integers(1, 6), seed=st.integers(0, 10**6))
def test_window_labels_match_brute_force(n, T, stride, seed):
    rng = np.random.default_rng(seed)
    labels = rng.random(n) < 0.1
    got = window_labels(labels, n, T, stride)
    brute = [bool(labels[s : s + T].any()) for s in range(0, n - T + 1, stride)] if n >= T else []
    assert got.tolist() == brute
    assert len(got) == window_count(n, T, stride)


def test_window_array_contents():
    x = np.arange(20.0).reshape(10, 2)
    w = window_array(x, 3, 4)
    assert w.shape == (2, 3, 2)
    np.testing.assert_array_equal(w[1], x[4:7])
