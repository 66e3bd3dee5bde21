"""Shared helpers: brute-force oracles and enumeration utilities."""

import itertools

import numpy as np
import pytest

from rerand.core import BalanceProblem


def quadratic_form_m(x: np.ndarray, w: np.ndarray) -> float:
    """Imbalance via the raw quadratic-form definition (independent oracle).

    Inverts the sample covariance directly and evaluates
    (n / (n_t n_c)) (W - (n_t/n) 1)' X S^-1 X' (W - (n_t/n) 1)
    without any whitening or caching.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n = x.shape[0]
    n_t = w.sum()
    n_c = n - n_t
    xc_mean = x.mean(axis=0)
    s = (x - xc_mean).T @ (x - xc_mean) / (n - 1)
    e = w - (n_t / n) * np.ones(n)
    v = x.T @ e
    return float((n / (n_t * n_c)) * v @ np.linalg.solve(s, v))


def enumerate_simple(n: int, n_treat: int) -> np.ndarray:
    """All C(n, n_treat) assignment vectors as an int8 matrix."""
    rows = []
    for combo in itertools.combinations(range(n), n_treat):
        w = np.zeros(n, dtype=np.int8)
        w[list(combo)] = 1
        rows.append(w)
    return np.asarray(rows)


def assignment_counts(draws, universe: np.ndarray) -> np.ndarray:
    """Draw counts per row of ``universe`` (rows must cover all draws)."""
    key = {tuple(row): i for i, row in enumerate(np.asarray(universe))}
    counts = np.zeros(len(universe), dtype=np.int64)
    for d in draws:
        w = d.assignment if hasattr(d, "assignment") else d
        counts[key[tuple(np.asarray(w))]] += 1
    return counts


def safe_threshold(ms: np.ndarray, frac: float) -> float:
    """Threshold near the frac-quantile, placed mid-gap between distinct M
    levels so boundary ties cannot flip membership under float noise.

    Mirror assignments share an M level up to rounding, so raw unique values
    can sit one ulp apart; levels are first merged at relative 1e-6.
    """
    vals = np.sort(np.asarray(ms, dtype=np.float64))
    scale = max(1.0, float(vals.max()))
    levels = [vals[0]]
    for v in vals[1:]:
        if v - levels[-1] > 1e-6 * scale:
            levels.append(v)
    idx = min(max(int(frac * len(levels)), 0), len(levels) - 2)
    return float(0.5 * (levels[idx] + levels[idx + 1]))


def mirror_pairs(universe: np.ndarray):
    """Index pairs (i, j) with universe[j] = 1 - universe[i], i <= j."""
    key = {tuple(row): i for i, row in enumerate(np.asarray(universe))}
    pairs = []
    for i, row in enumerate(universe):
        j = key.get(tuple(1 - row))
        if j is not None and i <= j:
            pairs.append((i, j))
    return pairs


def assert_mirror_symmetric(counts: np.ndarray, universe: np.ndarray, n_sigma: float = 4.0):
    """Each assignment appears as often as its mirror, within n_sigma."""
    for i, j in mirror_pairs(universe):
        if i == j:
            continue
        c1, c2 = counts[i], counts[j]
        if c1 + c2 == 0:
            continue
        assert abs(c1 - c2) <= n_sigma * np.sqrt(c1 + c2) + 1e-9, (
            f"mirror mismatch: {c1} vs {c2}"
        )


@pytest.fixture
def rng():
    return np.random.default_rng(20240901)
