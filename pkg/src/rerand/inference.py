"""Randomization-based analysis.

The Fisher randomization test imputes both potential outcomes under the
sharp hypothesis "every unit's effect equals theta", recomputes the
difference-in-means over redrawn acceptable assignments, and compares. The
two-sided p-value uses the plain count fraction; confidence bounds come from
inverting one-sided tests, whose p-values are monotone in theta up to Monte
Carlo noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    BracketFailed,
    ConfigError,
    DegenerateSample,
    DimensionMismatch,
    EmptyArm,
)
from .samplers import AssignmentDraw, derive_stream_seeds


@dataclass(frozen=True)
class OutcomeData:
    """Observed outcomes with the realized assignment."""

    observed: np.ndarray
    assignment: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.observed, dtype=np.float64)
        w = np.asarray(self.assignment)
        if y.ndim != 1 or w.shape != y.shape:
            raise DimensionMismatch(
                f"outcomes {y.shape} and assignment {w.shape} must be equal-length vectors"
            )
        if not np.all(np.isfinite(y)):
            raise DimensionMismatch("outcomes contain non-finite values")
        if not np.all((w == 0) | (w == 1)):
            raise DimensionMismatch("assignment entries must be 0 or 1")
        object.__setattr__(self, "observed", y)
        object.__setattr__(self, "assignment", w.astype(np.int8))

    @property
    def n(self) -> int:
        return self.observed.shape[0]


@dataclass
class InferenceReport:
    tau_hat: float
    p_value: float
    ci: tuple[float, float]
    alpha: float
    draws_used: int
    l_n: Optional[float] = None
    draw_m_values: Optional[np.ndarray] = None


def diff_in_means(outcomes: OutcomeData) -> float:
    """Treated-mean outcome minus control-mean outcome."""
    w = outcomes.assignment
    n_t = int(w.sum())
    if n_t == 0 or n_t == outcomes.n:
        raise EmptyArm("both arms must be nonempty")
    y = outcomes.observed
    return float(y[w == 1].mean() - y[w == 0].mean())


def as_assignment_matrix(draws) -> np.ndarray:
    """Normalize draw collections to a (B, n) int8 matrix."""
    if isinstance(draws, np.ndarray) and draws.ndim == 2:
        return draws.astype(np.int8, copy=False)
    rows = [d.assignment if isinstance(d, AssignmentDraw) else np.asarray(d) for d in draws]
    return np.asarray(rows, dtype=np.int8)


def _imputed(outcomes: OutcomeData, theta: float):
    y = outcomes.observed
    w = outcomes.assignment.astype(np.float64)
    return y + theta * (1.0 - w), y - theta * w


def _tau_per_draw(imp1: np.ndarray, imp0: np.ndarray, draws: np.ndarray) -> np.ndarray:
    d = draws.astype(np.float64)
    n = d.shape[1]
    n_t = d.sum(axis=1)
    if np.any(n_t == 0) or np.any(n_t == n):
        raise EmptyArm("a redrawn assignment leaves an arm empty")
    return (d @ imp1) / n_t - ((1.0 - d) @ imp0) / (n - n_t)


def frt_pvalue(
    outcomes: OutcomeData,
    draws,
    theta: float = 0.0,
    centered: bool = False,
    plus_one: bool = False,
) -> float:
    """Two-sided randomization p-value for the sharp hypothesis effect = theta.

    Potential outcomes are imputed as Y(1) = Y + theta (1 - W_obs) and
    Y(0) = Y - theta W_obs; the statistic is |tau_hat| exactly as displayed
    (``centered=True`` switches to |tau_hat - theta| on both sides).
    ``plus_one`` enables the conservative (1 + count) / (1 + B) variant.
    """
    mat = as_assignment_matrix(draws)
    if mat.shape[1] != outcomes.n:
        raise DimensionMismatch(
            f"draw length {mat.shape[1]} does not match outcomes n={outcomes.n}"
        )
    b = mat.shape[0]
    if b < 1:
        raise ConfigError("need at least one draw")
    imp1, imp0 = _imputed(outcomes, theta)
    taus = _tau_per_draw(imp1, imp0, mat)
    obs = diff_in_means(outcomes)
    if centered:
        stat = np.abs(taus - theta)
        ref = abs(obs - theta)
    else:
        stat = np.abs(taus)
        ref = abs(obs)
    count = int((stat >= ref).sum())
    if plus_one:
        return (1 + count) / (1 + b)
    return count / b


def _one_sided_pvalues(outcomes: OutcomeData, theta: float, mat: np.ndarray):
    """(lower-bound pv, upper-bound pv) at theta from one draw batch.

    The lower-bound test pits effect = theta against effect > theta, so its
    p-value P(tau_b(theta) >= tau_obs) increases with theta; the upper-bound
    p-value mirrors it.
    """
    imp1, imp0 = _imputed(outcomes, theta)
    taus = _tau_per_draw(imp1, imp0, mat)
    obs = diff_in_means(outcomes)
    pv_low = float((taus >= obs).mean())
    pv_up = float((taus <= obs).mean())
    return pv_low, pv_up


def two_sample_se(outcomes: OutcomeData) -> float:
    """Plain two-sample standard error of the difference in means."""
    y = outcomes.observed
    w = outcomes.assignment
    yt, yc = y[w == 1], y[w == 0]
    if yt.size < 1 or yc.size < 1:
        raise EmptyArm("both arms must be nonempty")
    vt = yt.var(ddof=1) if yt.size > 1 else 0.0
    vc = yc.var(ddof=1) if yc.size > 1 else 0.0
    return float(np.sqrt(vt / yt.size + vc / yc.size))


def ci_bounds(
    outcomes: OutcomeData,
    draw_fn: Callable[[int, int], object],
    alpha: float,
    n_draws: int,
    master_seed: int = 0,
    bracket_sds: float = 10.0,
    resolution_factor: float = 1e-3,
    grid_points: int = 200,
) -> tuple[float, float]:
    """Confidence bounds by inverting one-sided randomization tests.

    theta_l = sup{theta : pv_low(theta) <= alpha} and theta_u symmetric; the
    pair has nominal level 1 - 2 alpha. The search brackets tau_hat by
    ``bracket_sds`` two-sample standard errors and bisects to a resolution of
    ``resolution_factor`` standard errors; each theta evaluation generates a
    fresh batch of ``n_draws`` assignments from a seed derived from the theta
    grid position, so the pv curve is a fixed function of theta. If the
    recorded evaluations are inconsistent with monotonicity beyond Monte
    Carlo slack, a ``grid_points``-point scan takes the sup/inf directly.

    draw_fn(count, seed) must return assignments acceptable for the design.
    """
    if not 0.0 < alpha < 0.5:
        raise ConfigError("alpha must lie in (0, 0.5)")
    tau = diff_in_means(outcomes)
    sd = two_sample_se(outcomes)
    if sd == 0.0:
        sd = max(abs(tau), 1.0)
    lo = tau - bracket_sds * sd
    hi = tau + bracket_sds * sd
    res = resolution_factor * sd
    n_grid = int(round((hi - lo) / res))

    cache: dict[int, tuple[float, float]] = {}

    def eval_grid(idx: int) -> tuple[float, float]:
        if idx not in cache:
            theta = lo + idx * res
            seed = int(derive_stream_seeds(master_seed, idx, 1)[0])
            mat = as_assignment_matrix(draw_fn(n_draws, seed))
            cache[idx] = _one_sided_pvalues(outcomes, theta, mat)
        return cache[idx]

    slack = 4.0 * float(np.sqrt(alpha * (1 - alpha) / n_draws))

    def bisect(side: int) -> float:
        # side 0: pv_low nondecreasing, want largest idx with pv <= alpha
        # side 1: pv_up nonincreasing, want smallest idx with pv <= alpha
        lo_i, hi_i = 0, n_grid
        pv_lo = eval_grid(lo_i)[side]
        pv_hi = eval_grid(hi_i)[side]
        ok_lo = pv_lo <= alpha if side == 0 else pv_lo > alpha
        ok_hi = pv_hi > alpha if side == 0 else pv_hi <= alpha
        if not (ok_lo and ok_hi):
            return _grid_fallback(side)
        while hi_i - lo_i > 1:
            mid = (lo_i + hi_i) // 2
            pv = eval_grid(mid)[side]
            if (pv <= alpha) == (side == 0):
                lo_i = mid
            else:
                hi_i = mid
        idx = lo_i if side == 0 else hi_i
        # consistency check across everything evaluated so far
        pts = sorted((i, cache[i][side]) for i in cache)
        direction = 1.0 if side == 0 else -1.0
        for (i1, p1), (i2, p2) in zip(pts, pts[1:]):
            if direction * (p2 - p1) < -slack:
                return _grid_fallback(side)
        return lo + idx * res

    def _grid_fallback(side: int) -> float:
        step = max(1, n_grid // grid_points)
        idxs = list(range(0, n_grid + 1, step))
        hits = [i for i in idxs if eval_grid(i)[side] <= alpha]
        if not hits:
            raise BracketFailed(
                "one-sided p-value never crossed alpha inside the bracket"
            )
        idx = max(hits) if side == 0 else min(hits)
        return lo + idx * res

    theta_l = bisect(0)
    theta_u = bisect(1)
    if theta_l > theta_u:
        theta_l, theta_u = theta_u, theta_l
    return theta_l, theta_u


def randomness_metric(draws, tol: float = 1e-8, max_iter: int = 100_000) -> float:
    """Largest eigenvalue of the empirical covariance of 2W - 1 across draws.

    Larger values mean the draws concentrate on fewer distinct assignments.
    Power iteration with a deterministic start; relative tolerance 1e-8.
    """
    mat = as_assignment_matrix(draws)
    if mat.shape[0] < 2:
        raise ConfigError("need at least two draws")
    v = 2.0 * mat.astype(np.float64) - 1.0
    v -= v.mean(axis=0)
    if not np.any(v):
        raise DegenerateSample("all draws are identical")
    cov = (v.T @ v) / (mat.shape[0] - 1)
    rng = np.random.default_rng(0)
    vec = rng.standard_normal(cov.shape[0])
    vec /= np.linalg.norm(vec)
    lam = 0.0
    for _ in range(max_iter):
        nxt = cov @ vec
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            raise DegenerateSample("covariance annihilated the iterate")
        vec = nxt / norm
        lam_new = float(vec @ (cov @ vec))
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300):
            return lam_new
        lam = lam_new
    return lam
