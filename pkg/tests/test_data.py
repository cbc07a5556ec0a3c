import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from civrep.data import (SynthConfig, Dataset, Standardizer, generate_synthetic, load_csv, split,
                         write_csv)
from civrep.errors import ConfigError, DataError


@pytest.fixture(scope="module")
def big():
    return generate_synthetic(SynthConfig(n=50_000, seed=123))


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(n=1)


def test_columns_and_hidden_separation():
    ds = generate_synthetic(SynthConfig(n=50, seed=0))
    assert ds.columns == ["S", "X1", "X2", "X3", "X4", "X5"]
    assert ds.hidden.shape == (50, 5)
    assert not set(ds.hidden_columns) & set(ds.columns)
    assert set(np.unique(ds.w)) <= {0, 1}


def test_consistency_exact():
    ds = generate_synthetic(SynthConfig(n=1000, seed=1))
    np.testing.assert_array_equal(ds.y, ds.w * ds.y1 + (1 - ds.w) * ds.y0)


def test_same_seed_bit_identical():
    a = generate_synthetic(SynthConfig(n=300, seed=9))
    b = generate_synthetic(SynthConfig(n=300, seed=9))
    for name in ("x", "w", "y", "y0", "y1", "hidden"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    c = generate_synthetic(SynthConfig(n=300, seed=10))
    assert not np.array_equal(a.y, c.y)


def test_mean_effect_at_20k():
    # Var(y1 - y0) = 2 from the two unit-variance arm noises
    n = 20_000
    ds = generate_synthetic(SynthConfig(n=n, seed=4))
    assert abs((ds.y1 - ds.y0).mean() - 2.0) < 4 * math.sqrt(2) / math.sqrt(n)


def test_moments_at_50k(big):
    n = big.n
    for col, target in (("X4", 1.0), ("X5", 3.0)):
        v = big.column(col)
        assert abs(v.mean() - target) < 4 * v.std(ddof=1) / math.sqrt(n)
    d = big.y1 - big.y0
    assert abs(d.mean() - 2.0) < 4 * d.std(ddof=1) / math.sqrt(n)


def test_s_regression_recovers_coefficients(big):
    """OLS oracle: S on (1, X1, X2) gives (1.5, 1.5) within 4 standard errors."""
    s, x1, x2 = big.column("S"), big.column("X1"), big.column("X2")
    design = np.column_stack([np.ones(big.n), x1, x2])
    coef, *_ = np.linalg.lstsq(design, s, rcond=None)
    resid = s - design @ coef
    sigma2 = resid @ resid / (big.n - 3)
    se = np.sqrt(np.diag(sigma2 * np.linalg.inv(design.T @ design)))
    assert np.all(np.abs(coef[1:] - 1.5) < 4 * se[1:])


def test_noise_read_as_variance(big):
    # X1 = N(0,1) + 0.5 U2 + eps with Var(eps)=0.5 -> Var(X1) = 1.75 (std reading would give 1.5)
    v = big.column("X1").var(ddof=1)
    assert abs(v - 1.75) < 4 * 1.75 * math.sqrt(2 / (big.n - 1))


def test_treatment_propensity_logistic(big):
    u, u1 = big.hidden[:, 0], big.hidden[:, 1]
    p = 1 / (1 + np.exp(2 - u - u1 - big.column("X3") - big.column("X4")))
    assert abs(big.w.mean() - p.mean()) < 4 * math.sqrt(0.25 / big.n)


# ---- CSV

def test_csv_roundtrip_exact(tmp_path):
    ds = generate_synthetic(SynthConfig(n=200, seed=3))
    schema = write_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv", schema)
    assert back.columns == ds.columns
    for name in ("x", "w", "y", "y0", "y1", "hidden"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))
    assert back.hidden_columns == ds.hidden_columns


def test_csv_non_binary_treatment(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("A,T,Y\n1.0,0,1\n2.0,2,3\n3.0,1,2\n")
    with pytest.raises(DataError, match="not binary"):
        load_csv(p, {"T": "treatment", "Y": "outcome"})


def test_csv_small_hand_written(tmp_path):
    p = tmp_path / "small.csv"
    p.write_text("age,drop,T,Y\n30,9,1,2.5\n40,9,0,1.0\n50,9,1,3.5\n")
    ds = load_csv(p, {"T": "treatment", "Y": "outcome", "drop": "ignore"})
    assert ds.n == 3
    assert ds.columns == ["age"]
    np.testing.assert_array_equal(ds.w, [1, 0, 1])
    assert not ds.has_potential_outcomes


def test_csv_unparseable_cell_reports_location(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("A,T,Y\n1.0,0,1\nabc,1,3\n")
    with pytest.raises(DataError, match=r"row 3, column 'A'"):
        load_csv(p, {"T": "treatment", "Y": "outcome"})


def test_csv_missing_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("A,T\n1,0\n")
    with pytest.raises(DataError, match="missing"):
        load_csv(p, {"T": "treatment", "Y": "outcome"})


def test_csv_bad_schema(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("A,T,Y\n1,0,1\n")
    with pytest.raises(DataError):
        load_csv(p, {"T": "treatment", "Y": "outcome", "A": "covariate"})
    with pytest.raises(DataError):
        load_csv(p, {"T": "treatment"})


# ---- split

def test_split_sizes():
    ds = generate_synthetic(SynthConfig(n=10, seed=0))
    tr, te = split(ds, 0.7, seed=1)
    assert (tr.n, te.n) == (7, 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 300), st.floats(0.05, 0.95), st.integers(0, 10_000))
def test_split_partition(n, frac, seed):
    ds = generate_synthetic(SynthConfig(n=n, seed=0))
    if math.ceil(n * frac) >= n:
        with pytest.raises(DataError):
            split(ds, frac, seed)
        return
    tr, te = split(ds, frac, seed)
    assert set(tr.index) | set(te.index) == set(range(n))
    assert not set(tr.index) & set(te.index)
    tr2, _ = split(ds, frac, seed)
    np.testing.assert_array_equal(tr.index, tr2.index)


def test_split_rejects_bad_fraction():
    ds = generate_synthetic(SynthConfig(n=10, seed=0))
    for frac in (0.0, 1.0, 1.5):
        with pytest.raises(ConfigError):
            split(ds, frac, 0)


def test_standardizer_uses_given_rows_only():
    x = np.array([[1.0, 5.0], [3.0, 5.0]])
    s = Standardizer.fit(x)
    np.testing.assert_array_equal(s.transform(x), [[-1.0, 0.0], [1.0, 0.0]])
    np.testing.assert_array_equal(s.inverse(s.transform(x)), x)


def test_dataset_rejects_inconsistent_potential_outcomes():
    with pytest.raises(DataError):
        Dataset(x=np.zeros((2, 1)), w=[0, 1], y=[0.0, 0.0], columns=["a"],
                y0=np.zeros(2), y1=np.ones(2))
    with pytest.raises(DataError):
        Dataset(x=np.zeros((2, 1)), w=[0, 1], y=[np.nan, 0.0], columns=["a"])
