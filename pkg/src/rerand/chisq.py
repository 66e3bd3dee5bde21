"""Chi-square machinery for acceptance thresholds.

Self-contained implementations (regularized incomplete gamma by series /
continued fraction, quantiles by bisection with Newton polish, noncentral
quantile via the Poisson mixture) so the numeric core stays auditable. The
numeric routines are jit-compiled because sequential samplers evaluate a
noncentral quantile per draw. Accuracy budget: CDF absolute error <= 1e-10
for df <= 1e4, x <= 1e4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from numba import njit

from .errors import ConfigError

_EPS = 1e-16
_ITMAX = 10_000_000
_TINY = 1e-300


@njit(cache=True)
def _gamma_p_series(a, x):
    # lower regularized P(a, x) by power series; used for x < a + 1
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_ITMAX):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


@njit(cache=True)
def _gamma_q_contfrac(a, x):
    # upper regularized Q(a, x) by continued fraction (modified Lentz)
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _ITMAX):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


@njit(cache=True)
def _gamma_p(a, x):
    if x <= 0.0:
        return 0.0
    if x < a + 1.0:
        p = _gamma_p_series(a, x)
    else:
        p = 1.0 - _gamma_q_contfrac(a, x)
    if p < 0.0:
        return 0.0
    if p > 1.0:
        return 1.0
    return p


@njit(cache=True)
def _chisq_cdf(df, x):
    return _gamma_p(0.5 * df, 0.5 * x)


@njit(cache=True)
def _chisq_pdf(df, x):
    if x <= 0.0:
        return 0.0
    half = 0.5 * df
    return math.exp((half - 1.0) * math.log(x) - 0.5 * x - math.lgamma(half) - half * math.log(2.0))


@njit(cache=True)
def _chisq_quantile(df, prob):
    lo = 0.0
    hi = df + 1.0
    while _chisq_cdf(df, hi) < prob:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if _chisq_cdf(df, mid) < prob:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    x = 0.5 * (lo + hi)
    for _ in range(4):
        pdf = _chisq_pdf(df, x)
        if pdf <= 0.0:
            break
        step = (_chisq_cdf(df, x) - prob) / pdf
        x_new = x - step
        if x_new < lo or x_new > hi:
            break
        x = x_new
        if abs(step) <= 1e-14 * max(1.0, x):
            break
    return x


@njit(cache=True)
def _noncentral_chisq_cdf(df, lam, x):
    # Poisson mixture sum_j w_j P(df/2 + j, x/2); the incomplete-gamma terms
    # follow the recurrence P(a+1, x) = P(a, x) - x^a e^-x / Gamma(a+1) so a
    # single series evaluation covers the whole mixture. Truncates once the
    # remaining Poisson tail mass drops below 1e-12.
    if x <= 0.0:
        return 0.0
    if lam == 0.0:
        return _chisq_cdf(df, x)
    half_lam = 0.5 * lam
    a0 = 0.5 * df
    xx = 0.5 * x
    p_j = _gamma_p(a0, xx)
    # gamma-term t_j = xx^(a0+j) e^-xx / Gamma(a0+j+1), advanced multiplicatively
    t_j = math.exp(a0 * math.log(xx) - xx - math.lgamma(a0 + 1.0))
    w_j = math.exp(-half_lam)
    cum_w = 0.0
    total = 0.0
    j = 0
    while True:
        cum_w += w_j
        total += w_j * p_j
        if 1.0 - cum_w < 1e-12 and j >= half_lam:
            break
        p_j = p_j - t_j
        if p_j < 0.0:
            p_j = 0.0
        t_j *= xx / (a0 + j + 1.0)
        w_j *= half_lam / (j + 1.0)
        j += 1
        if j > 100_000_000:  # pragma: no cover
            break
    if total > 1.0:
        return 1.0
    return total


@njit(cache=True)
def _noncentral_chisq_quantile(df, lam, prob):
    if lam == 0.0:
        return _chisq_quantile(df, prob)
    lo = 0.0
    hi = df + lam + 40.0 * math.sqrt(2.0 * df + 4.0 * lam)
    while _noncentral_chisq_cdf(df, lam, hi) < prob:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if _noncentral_chisq_cdf(df, lam, mid) < prob:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def chisq_cdf(df: int, x: float) -> float:
    """P(chi2_df <= x), monotone nondecreasing in x."""
    if df < 1:
        raise ConfigError("df must be a positive integer")
    if x < 0:
        raise ConfigError("x must be nonnegative")
    return float(_chisq_cdf(float(df), float(x)))


def chisq_quantile(df: int, prob: float) -> float:
    """x with chisq_cdf(df, x) = prob; bisection plus a Newton polish."""
    if df < 1:
        raise ConfigError("df must be a positive integer")
    if not 0.0 < prob < 1.0:
        raise ConfigError("prob must lie in (0, 1)")
    return float(_chisq_quantile(float(df), float(prob)))


def noncentral_chisq_cdf(df: int, noncentrality: float, x: float) -> float:
    """CDF of the noncentral chi-square via its Poisson mixture of central ones."""
    if df < 1:
        raise ConfigError("df must be a positive integer")
    if noncentrality < 0:
        raise ConfigError("noncentrality must be nonnegative")
    if x < 0:
        raise ConfigError("x must be nonnegative")
    return float(_noncentral_chisq_cdf(float(df), float(noncentrality), float(x)))


def noncentral_chisq_quantile(df: int, noncentrality: float, prob: float) -> float:
    """Inverse noncentral chi-square CDF, bisection on the mixture CDF.

    The bracket [0, df + lam + 40 sqrt(2 df + 4 lam)] covers any probability
    of interest; derivative-free on purpose (robustness over speed). Reduces
    exactly to the central quantile at zero noncentrality.
    """
    if df < 1:
        raise ConfigError("df must be a positive integer")
    if noncentrality < 0:
        raise ConfigError("noncentrality must be nonnegative")
    if not 0.0 < prob < 1.0:
        raise ConfigError("prob must lie in (0, 1)")
    return float(_noncentral_chisq_quantile(float(df), float(noncentrality), float(prob)))


@dataclass(frozen=True)
class ThresholdSpec:
    """Acceptance rule for one balance constraint: target probability or a value."""

    df: int
    p_a: float | None = None
    explicit: float | None = None

    def __post_init__(self):
        if (self.p_a is None) == (self.explicit is None):
            raise ConfigError("specify exactly one of p_a / explicit")
        if self.p_a is not None and not 0.0 < self.p_a < 1.0:
            raise ConfigError("p_a must lie in (0, 1)")
        if self.explicit is not None and self.explicit <= 0.0:
            raise ConfigError("explicit threshold must be positive")
        if self.df < 1:
            raise ConfigError("df must be a positive integer")

    def value(self) -> float:
        if self.explicit is not None:
            return self.explicit
        return chisq_quantile(self.df, self.p_a)


@dataclass(frozen=True)
class SequentialThresholdSpec:
    """Per-stage acceptance schedule driven by stage shares.

    Stage k's threshold is (n_k / n_[k]) times the 1/s_k quantile of a
    noncentral chi-square with df p and noncentrality (n_[k-1]/n_k) M_[k-1],
    so later stages account for the imbalance already locked in.
    """

    stage_shares: tuple[int, ...]
    df: int
    stage_sizes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "stage_shares", tuple(int(s) for s in self.stage_shares))
        object.__setattr__(self, "stage_sizes", tuple(int(s) for s in self.stage_sizes))
        if len(self.stage_shares) != len(self.stage_sizes):
            raise ConfigError("stage_shares and stage_sizes lengths differ")
        if len(self.stage_shares) < 1:
            raise ConfigError("at least one stage required")
        if any(s < 1 for s in self.stage_shares):
            raise ConfigError("stage shares must be >= 1")
        if self.df < 1:
            raise ConfigError("df must be a positive integer")

    def stage_threshold(self, k: int, realized_m_prev: float) -> float:
        """Threshold a_k given the realized previous-stage imbalance (0 for k=1)."""
        if not 1 <= k <= len(self.stage_sizes):
            raise ConfigError(f"stage {k} out of range")
        n_k = self.stage_sizes[k - 1]
        n_cum = sum(self.stage_sizes[:k])
        n_prev = n_cum - n_k
        lam = (n_prev / n_k) * realized_m_prev if k > 1 else 0.0
        q = noncentral_chisq_quantile(self.df, lam, 1.0 / self.stage_shares[k - 1])
        return (n_k / n_cum) * q


def sequential_thresholds(
    spec: SequentialThresholdSpec, realized_m_prev: Sequence[float]
) -> tuple[float, ...]:
    """Thresholds (a_1, ..., a_K) for a given trajectory of realized M_[k-1].

    ``realized_m_prev[k-1]`` is the previous-stage imbalance seen before stage
    k (ignored for k = 1, where the noncentrality is zero).
    """
    if len(realized_m_prev) != len(spec.stage_sizes):
        raise ConfigError("need one realized M_[k-1] entry per stage")
    return tuple(
        spec.stage_threshold(k, float(realized_m_prev[k - 1]))
        for k in range(1, len(spec.stage_sizes) + 1)
    )
