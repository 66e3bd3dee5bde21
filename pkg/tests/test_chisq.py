"""Threshold calculus: CDFs, quantiles, and the sequential schedule."""

import math

import numpy as np
import pytest
import scipy.stats as ss

from rerand.chisq import (
    SequentialThresholdSpec,
    ThresholdSpec,
    chisq_cdf,
    chisq_quantile,
    noncentral_chisq_cdf,
    noncentral_chisq_quantile,
    sequential_thresholds,
)
from rerand.errors import ConfigError


def test_cdf_closed_forms():
    # df = 2 is exponential: CDF = 1 - exp(-x/2)
    for x in (0.1, 1.0, 2.0 * math.log(2.0), 7.5):
        assert chisq_cdf(2, x) == pytest.approx(1.0 - math.exp(-x / 2.0), abs=1e-12)
    assert chisq_cdf(2, 2.0 * math.log(2.0)) == pytest.approx(0.5, abs=1e-12)
    assert chisq_cdf(1, 0.0) == 0.0
    assert chisq_cdf(4, 0.0) == 0.0


def test_cdf_monotone():
    xs = np.linspace(0.0, 30.0, 200)
    vals = [chisq_cdf(7, x) for x in xs]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_cdf_accuracy_against_scipy():
    # absolute accuracy 1e-10 across the stated domain, including large df
    for df in (1, 2, 15, 50, 250, 1000, 10_000):
        for x in (0.001, 0.5, df / 2, df, 1.5 * df, 10_000):
            assert chisq_cdf(df, x) == pytest.approx(
                ss.chi2.cdf(x, df), abs=1e-10
            ), (df, x)


def test_cdf_monte_carlo_oracle_df50():
    # 1e7 sums of 50 squared standard normals, in chunks. 49.33 sits at the
    # chi-square median for df=50, so the oracle value is ~0.4998.
    mc = np.random.default_rng(7)
    x = 49.33
    hits = 0
    total = 10_000_000
    chunk = 100_000
    for _ in range(total // chunk):
        s = (mc.standard_normal((chunk, 50)) ** 2).sum(axis=1)
        hits += int((s <= x).sum())
    assert chisq_cdf(50, x) == pytest.approx(hits / total, abs=3e-4)


def test_quantile_closed_forms():
    assert chisq_quantile(2, 1e-3) == pytest.approx(-2.0 * math.log(1 - 1e-3), abs=1e-10)
    assert chisq_quantile(2, 1e-4) == pytest.approx(-2.0 * math.log(1 - 1e-4), abs=1e-10)
    # frozen from an independent bisection on the series CDF
    assert chisq_quantile(1, 0.5) == pytest.approx(0.45493642311957283, abs=1e-9)


def test_quantile_round_trip():
    for df in (1, 2, 15, 50, 250):
        for prob in (1e-4, 1e-3, 0.5, 0.999):
            x = chisq_quantile(df, prob)
            assert chisq_cdf(df, x) == pytest.approx(prob, abs=1e-8)


def test_noncentral_reduces_to_central():
    for df in (1, 5, 50):
        for x in (0.01, 1.0, df * 1.0, 3.0 * df):
            assert noncentral_chisq_cdf(df, 0.0, x) == pytest.approx(
                chisq_cdf(df, x), abs=1e-10
            )
        for prob in (1e-3, 0.25, 0.9):
            assert noncentral_chisq_quantile(df, 0.0, prob) == pytest.approx(
                chisq_quantile(df, prob), abs=1e-10
            )


def test_noncentral_against_scipy():
    for df, lam in [(2, 1.0), (50, 10.0), (50, 120.0), (250, 30.0)]:
        for x in (0.5 * df, df + lam, 2.0 * (df + lam)):
            assert noncentral_chisq_cdf(df, lam, x) == pytest.approx(
                ss.ncx2.cdf(x, df, lam), abs=1e-9
            )
        for prob in (1 / 761, 0.1, 0.9):
            assert noncentral_chisq_quantile(df, lam, prob) == pytest.approx(
                ss.ncx2.ppf(prob, df, lam), rel=1e-8
            )


def test_noncentral_quantile_monotone_in_lambda():
    vals = [noncentral_chisq_quantile(50, lam, 0.3) for lam in (0.0, 1.0, 5.0, 20.0, 80.0)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_threshold_spec():
    assert ThresholdSpec(df=2, p_a=1e-3).value() == pytest.approx(
        chisq_quantile(2, 1e-3)
    )
    assert ThresholdSpec(df=2, explicit=0.7).value() == 0.7
    with pytest.raises(ConfigError):
        ThresholdSpec(df=2)
    with pytest.raises(ConfigError):
        ThresholdSpec(df=2, p_a=0.5, explicit=1.0)
    with pytest.raises(ConfigError):
        ThresholdSpec(df=0, p_a=0.5)


def test_sequential_single_stage_reduces_to_simple():
    spec = SequentialThresholdSpec((1000,), 5, (40,))
    (a1,) = sequential_thresholds(spec, [0.0])
    assert a1 == pytest.approx(chisq_quantile(5, 1e-3), rel=1e-12)


def test_sequential_schedule_composition():
    # equal stages, shares as in the p = 50 setting
    spec = SequentialThresholdSpec((239, 761), 50, (100, 100))
    a1, a2 = sequential_thresholds(spec, [0.0, 0.0])
    assert a1 == pytest.approx(chisq_quantile(50, 1 / 239), rel=1e-12)
    assert a2 == pytest.approx(0.5 * noncentral_chisq_quantile(50, 0.0, 1 / 761), rel=1e-12)
    # realized first-stage imbalance feeds the noncentrality
    m1 = 21.7
    _, a2b = sequential_thresholds(spec, [0.0, m1])
    assert a2b == pytest.approx(
        0.5 * noncentral_chisq_quantile(50, (100 / 100) * m1, 1 / 761), rel=1e-12
    )
    assert a2b > a2


def test_sequential_schedule_p250_variant():
    spec = SequentialThresholdSpec((264, 736), 250, (500, 500))
    a1, a2 = sequential_thresholds(spec, [0.0, 10.0])
    assert a1 == pytest.approx(chisq_quantile(250, 1 / 264), rel=1e-12)
    assert a2 == pytest.approx(
        0.5 * noncentral_chisq_quantile(250, 10.0, 1 / 736), rel=1e-12
    )


def test_sequential_spec_validation():
    with pytest.raises(ConfigError):
        SequentialThresholdSpec((0, 10), 5, (10, 10))
    with pytest.raises(ConfigError):
        SequentialThresholdSpec((10,), 5, (10, 10))
    spec = SequentialThresholdSpec((10, 10), 5, (10, 10))
    with pytest.raises(ConfigError):
        sequential_thresholds(spec, [0.0])


def test_domain_errors():
    with pytest.raises(ConfigError):
        chisq_cdf(0, 1.0)
    with pytest.raises(ConfigError):
        chisq_cdf(2, -1.0)
    with pytest.raises(ConfigError):
        chisq_quantile(2, 0.0)
    with pytest.raises(ConfigError):
        noncentral_chisq_quantile(2, -1.0, 0.5)
