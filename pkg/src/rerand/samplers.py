"""Assignment samplers: CR, ARSRR, PSRR, and the local-search family.

Drawing conventions shared by every sampler:

- A draw starts from a uniform draw over the structure's feasible set.
- Swap-based samplers only ever report an assignment whose imbalance was
  re-derived from scratch at acceptance time, so ``m_value <= a`` holds
  exactly against a fresh evaluation.
- ``iterations`` counts candidate evaluations (CR draws for the
  acceptance-rejection samplers, proposal/shake evaluations for the
  swap-based ones).

Reproducible batches: draw ``i`` of a batch runs on an independent stream
whose 64-bit seed is ``splitmix64(master_seed XOR (i+1)*PHI)`` (see
``derive_stream_seeds``), so results do not depend on execution order or
worker count.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ._kernels import clust_vnsrr_kernel, psrr_kernel, strat_vnsrr_kernel, vnsrr_kernel
from .chisq import SequentialThresholdSpec
from .core import BalanceProblem, expand_cluster_assignment
from .design import (
    ClusterStructure,
    SequentialStructure,
    SimpleStructure,
    StratifiedStructure,
)
from .errors import ConfigError, ConfigInvalid, IterationBudgetExceeded

_PHI = np.uint64(0x9E3779B97F4A7C15)
_NO_TRACE_M = np.zeros(1, dtype=np.float64)
_NO_TRACE_KIND = np.zeros(1, dtype=np.int8)

METHODS = ("cr", "arsrr", "psrr", "vnsrr")


def derive_stream_seeds(master_seed: int, start: int, count: int) -> np.ndarray:
    """Stream seeds for draws start..start+count-1 (counter-based derivation).

    seed_i = splitmix64_mix(master_seed XOR (i+1) * PHI) with PHI the 64-bit
    golden-ratio constant; pure uint64 arithmetic, order-independent.
    """
    idx = np.arange(start, start + count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = np.uint64(master_seed & 0xFFFFFFFFFFFFFFFF) ^ ((idx + np.uint64(1)) * _PHI)
        x = x + _PHI
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return x


def _substream(seed: np.uint64, count: int) -> np.ndarray:
    """Derived seeds for stages/phases inside one draw's stream."""
    return derive_stream_seeds(int(seed), 1_000_003, count)


def _seed_from_rng(rng: np.random.Generator) -> np.uint64:
    return rng.integers(0, 2**64, dtype=np.uint64)


@dataclass(frozen=True)
class SamplerConfig:
    """Hyperparameters shared by the samplers.

    ``local_pairs`` (L) and ``shake_pairs`` (S) may be a single int applied
    everywhere or a per-stratum / per-stage tuple; ``None`` selects instance-
    size defaults L = min(10, max(1, min(n_t, n_c) // 4)), S = ceil(L / 2).
    """

    method: str = "vnsrr"
    local_pairs: Union[int, tuple, None] = None
    shake_pairs: Union[int, tuple, None] = None
    gamma: float = 20.0
    max_iterations: int = 10_000_000
    seed: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigInvalid(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.gamma <= 0:
            raise ConfigInvalid("gamma must be positive")
        if self.max_iterations < 1:
            raise ConfigInvalid("max_iterations must be >= 1")


@dataclass
class AssignmentDraw:
    """One accepted assignment with its diagnostics."""

    assignment: np.ndarray  # (n,) int8
    m_value: float
    iterations: int
    wall_time: float
    stage_m_values: Optional[tuple[float, ...]] = None
    cluster_indicator: Optional[np.ndarray] = None


def default_local_pairs(n_treat: int, n_control: int) -> int:
    return min(10, max(1, min(n_treat, n_control) // 4))


def default_shake_pairs(local_pairs: int) -> int:
    return max(1, math.ceil(local_pairs / 2))


def _scalar_pairs(config: SamplerConfig, n_treat: int, n_control: int, scope: int = 0):
    lp, sp = config.local_pairs, config.shake_pairs
    if isinstance(lp, tuple):
        lp = lp[scope]
    if isinstance(sp, tuple):
        sp = sp[scope]
    cap = min(n_treat, n_control)
    big_l = default_local_pairs(n_treat, n_control) if lp is None else int(lp)
    big_s = default_shake_pairs(big_l) if sp is None else int(sp)
    if not 1 <= big_l <= cap:
        raise ConfigInvalid(f"local_pairs must lie in [1, {cap}], got {big_l}")
    if not 0 <= big_s <= cap:
        raise ConfigInvalid(f"shake_pairs must lie in [0, {cap}], got {big_s}")
    return big_l, big_s


def _threshold_fn(problem: BalanceProblem, a) -> Callable[[int, float], float]:
    """Normalize scalar / per-stage sequence / schedule into a_k(k, m_prev)."""
    if isinstance(a, SequentialThresholdSpec):
        return a.stage_threshold
    if isinstance(a, (list, tuple, np.ndarray)):
        vals = [float(v) for v in a]
        s = problem.structure
        if isinstance(s, SequentialStructure) and len(vals) != s.n_stages:
            raise ConfigError(
                f"{len(vals)} thresholds given for {s.n_stages} stages"
            )
        return lambda k, m_prev: vals[k - 1]
    val = float(a)
    return lambda k, m_prev: val


# ---------------------------------------------------------------------------
# Complete randomization
# ---------------------------------------------------------------------------


def _cr_draw(problem: BalanceProblem, rng: np.random.Generator):
    """Uniform feasible assignment; returns (w, cluster_indicator_or_None)."""
    s = problem.structure
    n = problem.n
    w = np.zeros(n, dtype=np.int8)
    if isinstance(s, SimpleStructure):
        w[rng.permutation(n)[: s.n_treat]] = 1
        return w, None
    if isinstance(s, SequentialStructure):
        bounds = s.boundaries()
        for k in range(s.n_stages):
            lo, hi = int(bounds[k]), int(bounds[k + 1])
            w[lo + rng.permutation(hi - lo)[: s.stage_treated[k]]] = 1
        return w, None
    if isinstance(s, StratifiedStructure):
        for idx, ntk in zip(s.strata, s.stratum_treated):
            idx = np.asarray(idx)
            w[rng.permutation(idx)[:ntk]] = 1
        return w, None
    if isinstance(s, ClusterStructure):
        u = np.zeros(s.n_clusters, dtype=np.int8)
        u[rng.permutation(s.n_clusters)[: s.n_treat_clusters]] = 1
        return expand_cluster_assignment(problem, u), u
    raise TypeError(f"unknown structure {type(s)}")  # pragma: no cover


def _m_of(problem: BalanceProblem, w: np.ndarray) -> float:
    wf = w.astype(np.float64)
    treated_sum = wf @ problem.whitened
    nt = int(round(wf.sum()))
    n = problem.n
    diff = treated_sum - (nt / n) * problem.total_whitened
    return (n / (nt * (n - nt))) * float(diff @ diff)


def sample_cr(problem: BalanceProblem, rng: np.random.Generator) -> AssignmentDraw:
    """One uniform draw from the structure's feasible set (no balance constraint)."""
    t0 = time.perf_counter()
    w, u = _cr_draw(problem, rng)
    m = _m_of(problem, w)
    return AssignmentDraw(
        assignment=w,
        m_value=m,
        iterations=1,
        wall_time=time.perf_counter() - t0,
        cluster_indicator=u,
    )


# ---------------------------------------------------------------------------
# Acceptance-rejection (works for all four structures)
# ---------------------------------------------------------------------------


def sample_arsrr(
    problem: BalanceProblem, a, config: SamplerConfig, rng: np.random.Generator
) -> AssignmentDraw:
    """Redraw complete randomizations until M <= a.

    For sequential structures this is the per-stage variant: stage k redraws
    its own block until M_[k] <= a_k, with earlier stages frozen; ``a`` may be
    a scalar (broadcast), a per-stage sequence, or a threshold schedule.
    """
    t0 = time.perf_counter()
    s = problem.structure
    thr = _threshold_fn(problem, a)
    budget = config.max_iterations
    if isinstance(s, SequentialStructure):
        return _seq_arsrr(problem, thr, budget, rng, t0)
    a_val = thr(1, 0.0)
    if isinstance(s, ClusterStructure):
        csums = problem.cluster_whitened_sums
        csizes = problem.cluster_sizes
        n = problem.n
        total = problem.total_whitened
        k_t = s.n_treat_clusters
        iters = 0
        while True:
            iters += 1
            if iters > budget:
                raise IterationBudgetExceeded(
                    f"no acceptable cluster assignment within {budget} draws"
                )
            u = np.zeros(s.n_clusters, dtype=np.int8)
            u[rng.permutation(s.n_clusters)[:k_t]] = 1
            mask = u.astype(bool)
            nt = int(csizes[mask].sum())
            diff = csums[mask].sum(axis=0) - (nt / n) * total
            m = (n / (nt * (n - nt))) * float(diff @ diff)
            if m <= a_val:
                return AssignmentDraw(
                    assignment=expand_cluster_assignment(problem, u),
                    m_value=m,
                    iterations=iters,
                    wall_time=time.perf_counter() - t0,
                    cluster_indicator=u,
                )
    # simple and stratified share the unit-level redraw loop
    zt = problem.whitened
    n = problem.n
    nt = problem.n_treat
    scale = problem.scale
    center = problem.center()
    iters = 0
    while True:
        iters += 1
        if iters > budget:
            raise IterationBudgetExceeded(
                f"no acceptable assignment within {budget} draws; "
                f"threshold a={a_val:.6g} may be infeasibly small"
            )
        if isinstance(s, StratifiedStructure):
            treated = np.concatenate(
                [
                    rng.permutation(np.asarray(idx))[:ntk]
                    for idx, ntk in zip(s.strata, s.stratum_treated)
                ]
            )
        else:
            treated = rng.permutation(n)[:nt]
        diff = zt[treated].sum(axis=0) - center
        m = scale * float(diff @ diff)
        if m <= a_val:
            w = np.zeros(n, dtype=np.int8)
            w[treated] = 1
            return AssignmentDraw(
                assignment=w,
                m_value=m,
                iterations=iters,
                wall_time=time.perf_counter() - t0,
            )


def _seq_arsrr(problem, thr, budget, rng, t0) -> AssignmentDraw:
    s = problem.structure
    bounds = s.boundaries()
    w = np.zeros(problem.n, dtype=np.int8)
    stage_ms = []
    m_prev = 0.0
    total_iters = 0
    for k in range(1, s.n_stages + 1):
        stage = problem.stages[k - 1]
        lo, hi = int(bounds[k - 1]), int(bounds[k])
        a_k = thr(k, m_prev)
        offset = _stage_offset(problem, w, k)
        zt_free = stage.whitened[lo:hi]
        ntk = s.stage_treated[k - 1]
        iters = 0
        while True:
            iters += 1
            if iters > budget:
                raise IterationBudgetExceeded(
                    f"stage {k}: no acceptable block within {budget} draws",
                    stage=k,
                )
            pick = rng.permutation(hi - lo)[:ntk]
            diff = zt_free[pick].sum(axis=0) + offset
            m = stage.scale * float(diff @ diff)
            if m <= a_k:
                break
        w[lo + pick] = 1
        stage_ms.append(m)
        m_prev = m
        total_iters += iters
    return AssignmentDraw(
        assignment=w,
        m_value=stage_ms[-1],
        iterations=total_iters,
        wall_time=time.perf_counter() - t0,
        stage_m_values=tuple(stage_ms),
    )


def _stage_offset(problem: BalanceProblem, w: np.ndarray, k: int) -> np.ndarray:
    """Fixed whitened contribution of frozen prefix plus centering, stage k."""
    s = problem.structure
    stage = problem.stages[k - 1]
    bounds = s.boundaries()
    lo = int(bounds[k - 1])
    frac = stage.n_treat_cum / stage.n_cum
    offset = -frac * stage.total
    if lo > 0:
        offset = offset + w[:lo].astype(np.float64) @ stage.whitened[:lo]
    return np.ascontiguousarray(offset)


# ---------------------------------------------------------------------------
# Kernel-backed swap samplers
# ---------------------------------------------------------------------------


def _simple_offset(problem: BalanceProblem) -> np.ndarray:
    return np.ascontiguousarray(-problem.center())


def _run_vnsrr_batch(problem, a_val, big_l, big_s, budget, seeds, trace_cap=0):
    if trace_cap > 0:
        tm = np.zeros(trace_cap, dtype=np.float64)
        tk = np.zeros(trace_cap, dtype=np.int8)
    else:
        tm, tk = _NO_TRACE_M, _NO_TRACE_KIND
    out = vnsrr_kernel(
        problem.whitened,
        _simple_offset(problem),
        problem.scale,
        problem.n_treat,
        a_val,
        big_l,
        big_s,
        budget,
        seeds,
        tm,
        tk,
        trace_cap > 0,
    )
    return out, tm, tk


def sample_vnsrr(
    problem: BalanceProblem, a, config: SamplerConfig, rng: np.random.Generator
) -> AssignmentDraw:
    """Local-search/shake rerandomization for the simple design.

    Each pass examines L disjoint random treated/control pairs in a random
    joint order, applying any strictly improving swap immediately; a pass with
    no improvement triggers S forced random swaps.
    """
    if not isinstance(problem.structure, SimpleStructure):
        raise ConfigInvalid(
            "sample_vnsrr handles the simple design; use the sequential/"
            "stratified/cluster variants for structured problems"
        )
    t0 = time.perf_counter()
    a_val = _threshold_fn(problem, a)(1, 0.0)
    big_l, big_s = _scalar_pairs(config, problem.n_treat, problem.n_control)
    seeds = np.array([_seed_from_rng(rng)], dtype=np.uint64)
    (w, m, evals, _), _, _ = _run_vnsrr_batch(
        problem, a_val, big_l, big_s, config.max_iterations, seeds
    )
    if evals[0] < 0:
        raise IterationBudgetExceeded(
            f"budget {config.max_iterations} exhausted before M <= {a_val:.6g}"
        )
    return AssignmentDraw(
        assignment=w[0].astype(np.int8),
        m_value=float(m[0]),
        iterations=int(evals[0]),
        wall_time=time.perf_counter() - t0,
    )


def sample_psrr(
    problem: BalanceProblem, a, config: SamplerConfig, rng: np.random.Generator
) -> AssignmentDraw:
    """Pair-switching rerandomization (simple or sequential designs only).

    Picks one random treated/control pair per step; improving swaps are taken,
    worsening ones accepted with probability (M / M*)^gamma.
    """
    s = problem.structure
    t0 = time.perf_counter()
    if isinstance(s, SequentialStructure):
        return _seq_swap_draw(problem, a, config, _seed_from_rng(rng), t0, psrr=True)
    if not isinstance(s, SimpleStructure):
        raise ConfigInvalid("pair-switching is not applicable to stratified/cluster designs")
    a_val = _threshold_fn(problem, a)(1, 0.0)
    seeds = np.array([_seed_from_rng(rng)], dtype=np.uint64)
    w, m, evals, _ = psrr_kernel(
        problem.whitened,
        _simple_offset(problem),
        problem.scale,
        problem.n_treat,
        a_val,
        config.gamma,
        config.max_iterations,
        seeds,
        _NO_TRACE_M,
        _NO_TRACE_KIND,
        False,
    )
    if evals[0] < 0:
        raise IterationBudgetExceeded(
            f"budget {config.max_iterations} exhausted before M <= {a_val:.6g}"
        )
    return AssignmentDraw(
        assignment=w[0].astype(np.int8),
        m_value=float(m[0]),
        iterations=int(evals[0]),
        wall_time=time.perf_counter() - t0,
    )


def _seq_swap_draw(problem, a, config, stream_seed, t0, psrr: bool) -> AssignmentDraw:
    """Stage-by-stage kernel runs with the prefix frozen (SeqVNSRR / SeqPSRR)."""
    s = problem.structure
    thr = _threshold_fn(problem, a)
    bounds = s.boundaries()
    w = np.zeros(problem.n, dtype=np.int8)
    stage_seeds = _substream(stream_seed, s.n_stages)
    stage_ms = []
    m_prev = 0.0
    total_evals = 0
    for k in range(1, s.n_stages + 1):
        stage = problem.stages[k - 1]
        lo, hi = int(bounds[k - 1]), int(bounds[k])
        a_k = thr(k, m_prev)
        offset = _stage_offset(problem, w, k)
        zt_free = np.ascontiguousarray(stage.whitened[lo:hi])
        ntk = s.stage_treated[k - 1]
        nck = (hi - lo) - ntk
        seeds = stage_seeds[k - 1 : k]
        if psrr:
            wk, mk, evals, _ = psrr_kernel(
                zt_free, offset, stage.scale, ntk, a_k,
                config.gamma, config.max_iterations, seeds,
                _NO_TRACE_M, _NO_TRACE_KIND, False,
            )
        else:
            big_l, big_s = _scalar_pairs(config, ntk, nck, scope=k - 1)
            wk, mk, evals, _ = vnsrr_kernel(
                zt_free, offset, stage.scale, ntk, a_k,
                big_l, big_s, config.max_iterations, seeds,
                _NO_TRACE_M, _NO_TRACE_KIND, False,
            )
        if evals[0] < 0:
            raise IterationBudgetExceeded(
                f"stage {k}: budget {config.max_iterations} exhausted "
                f"before M_[k] <= {a_k:.6g}",
                stage=k,
            )
        w[lo:hi] = wk[0]
        stage_ms.append(float(mk[0]))
        m_prev = float(mk[0])
        total_evals += int(evals[0])
    return AssignmentDraw(
        assignment=w,
        m_value=stage_ms[-1],
        iterations=total_evals,
        wall_time=time.perf_counter() - t0,
        stage_m_values=tuple(stage_ms),
    )


def sample_seq_vnsrr(
    problem: BalanceProblem, thresholds, config: SamplerConfig, rng: np.random.Generator
) -> AssignmentDraw:
    """Stage-wise local search; stage k balances M_[k] with the prefix frozen.

    ``thresholds`` may be per-stage values or a SequentialThresholdSpec whose
    stage k threshold uses the realized M_[k-1] of this very draw.
    """
    if not isinstance(problem.structure, SequentialStructure):
        raise ConfigInvalid("sample_seq_vnsrr requires a sequential structure")
    return _seq_swap_draw(
        problem, thresholds, config, _seed_from_rng(rng), time.perf_counter(), psrr=False
    )


def _strat_layout(problem: BalanceProblem):
    s = problem.structure
    tslot_start = np.zeros(s.n_strata + 1, dtype=np.int64)
    cslot_start = np.zeros(s.n_strata + 1, dtype=np.int64)
    unit_of = np.empty(problem.n, dtype=np.int64)
    pos = 0
    for k, idx in enumerate(s.strata):
        ntk = s.stratum_treated[k]
        tslot_start[k + 1] = tslot_start[k] + ntk
        cslot_start[k + 1] = cslot_start[k] + (len(idx) - ntk)
        for i in idx:
            unit_of[pos] = i
            pos += 1
    return unit_of, tslot_start, cslot_start


def _strat_pair_arrays(problem: BalanceProblem, config: SamplerConfig):
    s = problem.structure
    l_arr = np.zeros(s.n_strata, dtype=np.int64)
    s_arr = np.zeros(s.n_strata, dtype=np.int64)
    for k in range(s.n_strata):
        ntk = s.stratum_treated[k]
        nck = len(s.strata[k]) - ntk
        cap = min(ntk, nck)
        lp, sp = config.local_pairs, config.shake_pairs
        if isinstance(lp, tuple):
            lp = lp[k]
        if isinstance(sp, tuple):
            sp = sp[k]
        if lp is None:
            big_l = default_local_pairs(ntk, nck) if cap >= 1 else 0
        else:
            big_l = int(lp)
        big_s = (default_shake_pairs(big_l) if big_l >= 1 else 0) if sp is None else int(sp)
        if not 0 <= big_l <= cap:
            raise ConfigInvalid(f"stratum {k}: local_pairs must lie in [0, {cap}], got {big_l}")
        if not 0 <= big_s <= cap:
            raise ConfigInvalid(f"stratum {k}: shake_pairs must lie in [0, {cap}], got {big_s}")
        l_arr[k] = big_l
        s_arr[k] = big_s
    if l_arr.sum() < 1:
        raise ConfigInvalid("total local pairs across strata must be >= 1")
    return l_arr, s_arr


def sample_strat_vnsrr(
    problem: BalanceProblem, a, config: SamplerConfig, rng: np.random.Generator
) -> AssignmentDraw:
    """Stratified local search: per-stratum disjoint pair lists aggregated and
    randomly permuted; shaking forces swaps within every stratum."""
    if not isinstance(problem.structure, StratifiedStructure):
        raise ConfigInvalid("sample_strat_vnsrr requires a stratified structure")
    t0 = time.perf_counter()
    a_val = _threshold_fn(problem, a)(1, 0.0)
    unit_of, tslot_start, cslot_start = _strat_layout(problem)
    l_arr, s_arr = _strat_pair_arrays(problem, config)
    seeds = np.array([_seed_from_rng(rng)], dtype=np.uint64)
    w, m, evals, _ = strat_vnsrr_kernel(
        problem.whitened,
        _simple_offset(problem),
        problem.scale,
        a_val,
        unit_of,
        tslot_start,
        cslot_start,
        l_arr,
        s_arr,
        config.max_iterations,
        seeds,
        _NO_TRACE_M,
        _NO_TRACE_KIND,
        False,
    )
    if evals[0] < 0:
        raise IterationBudgetExceeded(
            f"budget {config.max_iterations} exhausted before M <= {a_val:.6g}"
        )
    return AssignmentDraw(
        assignment=w[0].astype(np.int8),
        m_value=float(m[0]),
        iterations=int(evals[0]),
        wall_time=time.perf_counter() - t0,
    )


def sample_clust_vnsrr(
    problem: BalanceProblem, a, config: SamplerConfig, rng: np.random.Generator
) -> AssignmentDraw:
    """Cluster-level local search; the output is expanded to unit level."""
    s = problem.structure
    if not isinstance(s, ClusterStructure):
        raise ConfigInvalid("sample_clust_vnsrr requires a cluster structure")
    t0 = time.perf_counter()
    a_val = _threshold_fn(problem, a)(1, 0.0)
    k_t = s.n_treat_clusters
    k_c = s.n_clusters - k_t
    big_l, big_s = _scalar_pairs(config, k_t, k_c)
    seeds = np.array([_seed_from_rng(rng)], dtype=np.uint64)
    u, m, evals, _ = clust_vnsrr_kernel(
        problem.cluster_whitened_sums,
        problem.cluster_sizes.astype(np.float64),
        problem.total_whitened,
        float(problem.n),
        k_t,
        a_val,
        big_l,
        big_s,
        config.max_iterations,
        seeds,
        _NO_TRACE_M,
        _NO_TRACE_KIND,
        False,
    )
    if evals[0] < 0:
        raise IterationBudgetExceeded(
            f"budget {config.max_iterations} exhausted before M <= {a_val:.6g}"
        )
    u0 = u[0].astype(np.int8)
    return AssignmentDraw(
        assignment=expand_cluster_assignment(problem, u0),
        m_value=float(m[0]),
        iterations=int(evals[0]),
        wall_time=time.perf_counter() - t0,
        cluster_indicator=u0,
    )


# ---------------------------------------------------------------------------
# Dispatch and batching
# ---------------------------------------------------------------------------


def sample_one(
    problem: BalanceProblem, a, config: SamplerConfig, rng: np.random.Generator
) -> AssignmentDraw:
    """Route to the sampler matching config.method and the structure."""
    method = config.method
    if method == "cr":
        return sample_cr(problem, rng)
    if method == "arsrr":
        return sample_arsrr(problem, a, config, rng)
    if method == "psrr":
        return sample_psrr(problem, a, config, rng)
    s = problem.structure
    if isinstance(s, SimpleStructure):
        return sample_vnsrr(problem, a, config, rng)
    if isinstance(s, SequentialStructure):
        return sample_seq_vnsrr(problem, a, config, rng)
    if isinstance(s, StratifiedStructure):
        return sample_strat_vnsrr(problem, a, config, rng)
    return sample_clust_vnsrr(problem, a, config, rng)


def _draws_from_kernel_out(problem, w, m, evals, elapsed, u_level=False):
    batch = w.shape[0]
    per = elapsed / batch
    draws = []
    for b in range(batch):
        if u_level:
            u = w[b].astype(np.int8)
            draws.append(
                AssignmentDraw(
                    assignment=expand_cluster_assignment(problem, u),
                    m_value=float(m[b]),
                    iterations=int(evals[b]),
                    wall_time=per,
                    cluster_indicator=u,
                )
            )
        else:
            draws.append(
                AssignmentDraw(
                    assignment=w[b].astype(np.int8),
                    m_value=float(m[b]),
                    iterations=int(evals[b]),
                    wall_time=per,
                )
            )
    return draws


def _uniform_keys(seeds: np.ndarray, n: int) -> np.ndarray:
    """(B, n) uniforms; entry (i, j) depends only on (seeds[i], j).

    Same splitmix64 mixing as the draw streams, applied to the per-draw seed
    offset by the column index, so vectorized complete randomization stays a
    pure function of each draw's seed regardless of batch chunking.
    """
    idx = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = seeds[:, None] + idx[None, :] * _PHI
        x = x + _PHI
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)) * (1.0 / 9007199254740992.0)


def _cr_batch(problem: BalanceProblem, seeds: np.ndarray):
    """Vectorized complete randomization for a whole batch."""
    s = problem.structure
    batch = seeds.shape[0]
    n = problem.n
    if isinstance(s, ClusterStructure):
        keys = _uniform_keys(seeds, s.n_clusters)
        picks = np.argpartition(keys, s.n_treat_clusters - 1, axis=1)[
            :, : s.n_treat_clusters
        ]
        u = np.zeros((batch, s.n_clusters), dtype=np.uint8)
        np.put_along_axis(u, picks, 1, axis=1)
        w = np.zeros((batch, n), dtype=np.uint8)
        for k, idx in enumerate(s.clusters):
            w[:, list(idx)] = u[:, k : k + 1]
        from .core import mahalanobis_many

        return u, mahalanobis_many(problem, w), True
    keys = _uniform_keys(seeds, n)
    w = np.zeros((batch, n), dtype=np.uint8)
    if isinstance(s, SimpleStructure):
        picks = np.argpartition(keys, s.n_treat - 1, axis=1)[:, : s.n_treat]
        np.put_along_axis(w, picks, 1, axis=1)
    elif isinstance(s, SequentialStructure):
        bounds = s.boundaries()
        for k in range(s.n_stages):
            lo, hi = int(bounds[k]), int(bounds[k + 1])
            block = keys[:, lo:hi]
            picks = lo + np.argpartition(block, s.stage_treated[k] - 1, axis=1)[
                :, : s.stage_treated[k]
            ]
            np.put_along_axis(w, picks, 1, axis=1)
    else:
        for idx, ntk in zip(s.strata, s.stratum_treated):
            if ntk == 0:
                continue
            cols = np.asarray(idx)
            block = keys[:, cols]
            picks = cols[np.argpartition(block, ntk - 1, axis=1)[:, :ntk]]
            np.put_along_axis(w, picks, 1, axis=1)
    from .core import mahalanobis_many

    return w, mahalanobis_many(problem, w), False


def _batch_fast_path(problem, a, config, seeds):
    """Whole-batch kernel call where the method/structure pair allows it."""
    s = problem.structure
    method = config.method
    t0 = time.perf_counter()
    if method == "cr":
        w, m, u_level = _cr_batch(problem, seeds)
        evals = np.ones(seeds.shape[0], dtype=np.int64)
        return w, m, evals, time.perf_counter() - t0, u_level
    if isinstance(s, SimpleStructure) and method == "vnsrr":
        a_val = _threshold_fn(problem, a)(1, 0.0)
        big_l, big_s = _scalar_pairs(config, problem.n_treat, problem.n_control)
        w, m, evals, _ = vnsrr_kernel(
            problem.whitened, _simple_offset(problem), problem.scale,
            problem.n_treat, a_val, big_l, big_s, config.max_iterations,
            seeds, _NO_TRACE_M, _NO_TRACE_KIND, False,
        )
        return w, m, evals, time.perf_counter() - t0, False
    if isinstance(s, SimpleStructure) and method == "psrr":
        a_val = _threshold_fn(problem, a)(1, 0.0)
        w, m, evals, _ = psrr_kernel(
            problem.whitened, _simple_offset(problem), problem.scale,
            problem.n_treat, a_val, config.gamma, config.max_iterations,
            seeds, _NO_TRACE_M, _NO_TRACE_KIND, False,
        )
        return w, m, evals, time.perf_counter() - t0, False
    if isinstance(s, StratifiedStructure) and method == "vnsrr":
        a_val = _threshold_fn(problem, a)(1, 0.0)
        unit_of, tslot_start, cslot_start = _strat_layout(problem)
        l_arr, s_arr = _strat_pair_arrays(problem, config)
        w, m, evals, _ = strat_vnsrr_kernel(
            problem.whitened, _simple_offset(problem), problem.scale, a_val,
            unit_of, tslot_start, cslot_start, l_arr, s_arr,
            config.max_iterations, seeds, _NO_TRACE_M, _NO_TRACE_KIND, False,
        )
        return w, m, evals, time.perf_counter() - t0, False
    if isinstance(s, ClusterStructure) and method == "vnsrr":
        a_val = _threshold_fn(problem, a)(1, 0.0)
        k_t = s.n_treat_clusters
        big_l, big_s = _scalar_pairs(config, k_t, s.n_clusters - k_t)
        u, m, evals, _ = clust_vnsrr_kernel(
            problem.cluster_whitened_sums, problem.cluster_sizes.astype(np.float64),
            problem.total_whitened, float(problem.n), k_t, a_val, big_l, big_s,
            config.max_iterations, seeds, _NO_TRACE_M, _NO_TRACE_KIND, False,
        )
        return u, m, evals, time.perf_counter() - t0, True
    return None


def _batch_range(problem, a, config, master_seed, start, count):
    """Draws start..start+count-1 of the batch keyed by master_seed."""
    seeds = derive_stream_seeds(master_seed, start, count)
    fast = _batch_fast_path(problem, a, config, seeds)
    if fast is not None:
        w, m, evals, elapsed, u_level = fast
        bad = np.flatnonzero(evals < 0)
        if bad.size:
            raise IterationBudgetExceeded(
                f"draw {start + int(bad[0])}: budget {config.max_iterations} exhausted",
                draw_index=start + int(bad[0]),
            )
        return _draws_from_kernel_out(problem, w, m, evals, elapsed, u_level)
    seq_swap = isinstance(problem.structure, SequentialStructure) and config.method in (
        "vnsrr",
        "psrr",
    )
    draws = []
    for i in range(count):
        try:
            if seq_swap:
                draws.append(
                    _seq_swap_draw(
                        problem, a, config, seeds[i], time.perf_counter(),
                        psrr=config.method == "psrr",
                    )
                )
            else:
                rng = np.random.default_rng(int(seeds[i]))
                draws.append(sample_one(problem, a, config, rng))
        except IterationBudgetExceeded as err:
            err.draw_index = start + i
            raise
    return draws


def _pool_worker(args):
    problem, a, config, master_seed, start, count = args
    return start, _batch_range(problem, a, config, master_seed, start, count)


def sample_batch(
    problem: BalanceProblem,
    a,
    config: SamplerConfig,
    count: int,
    master_seed: Optional[int] = None,
    workers: int = 1,
) -> list[AssignmentDraw]:
    """``count`` independent draws on derived per-draw streams.

    Results are a pure function of (problem, a, config, count, master_seed):
    execution order and worker count never change them. ``master_seed`` falls
    back to config.seed, then to OS entropy.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    if master_seed is None:
        master_seed = config.seed
    if master_seed is None:
        master_seed = int(np.random.SeedSequence().entropy) & 0xFFFFFFFFFFFFFFFF
    if workers <= 1 or count < 4:
        return _batch_range(problem, a, config, master_seed, 0, count)
    workers = min(workers, count)
    bounds = np.linspace(0, count, workers + 1).astype(int)
    jobs = [
        (problem, a, config, master_seed, int(bounds[j]), int(bounds[j + 1] - bounds[j]))
        for j in range(workers)
        if bounds[j + 1] > bounds[j]
    ]
    results = {}
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for start, draws in pool.map(_pool_worker, jobs):
            results[start] = draws
    out = []
    for start in sorted(results):
        out.extend(results[start])
    return out


# ---------------------------------------------------------------------------
# Traced variants (testing hooks: trajectory of applied states)
# ---------------------------------------------------------------------------


def sample_vnsrr_traced(problem, a, config, stream_seed, trace_cap=100_000):
    """Single traced draw; returns (draw, m_trajectory, step_kinds)."""
    a_val = _threshold_fn(problem, a)(1, 0.0)
    big_l, big_s = _scalar_pairs(config, problem.n_treat, problem.n_control)
    seeds = np.array([np.uint64(stream_seed)], dtype=np.uint64)
    (w, m, evals, tlen), tm, tk = _run_vnsrr_batch(
        problem, a_val, big_l, big_s, config.max_iterations, seeds, trace_cap
    )
    if evals[0] < 0:
        raise IterationBudgetExceeded("budget exhausted")
    draw = AssignmentDraw(w[0].astype(np.int8), float(m[0]), int(evals[0]), 0.0)
    return draw, tm[: tlen[0]].copy(), tk[: tlen[0]].copy()


def sample_psrr_traced(problem, a, config, stream_seed, trace_cap=100_000):
    a_val = _threshold_fn(problem, a)(1, 0.0)
    tm = np.zeros(trace_cap, dtype=np.float64)
    tk = np.zeros(trace_cap, dtype=np.int8)
    seeds = np.array([np.uint64(stream_seed)], dtype=np.uint64)
    w, m, evals, tlen = psrr_kernel(
        problem.whitened, _simple_offset(problem), problem.scale,
        problem.n_treat, a_val, config.gamma, config.max_iterations,
        seeds, tm, tk, True,
    )
    if evals[0] < 0:
        raise IterationBudgetExceeded("budget exhausted")
    draw = AssignmentDraw(w[0].astype(np.int8), float(m[0]), int(evals[0]), 0.0)
    return draw, tm[: tlen[0]].copy(), tk[: tlen[0]].copy()
