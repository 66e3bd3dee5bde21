"""Mahalanobis balance objective with constant-time-per-swap evaluation.

The imbalance of an assignment ``W`` is

    M(W) = (n / (n_t * n_c)) * || zt' W - (n_t / n) * zt' 1 ||^2

where ``zt`` is the whitened covariate matrix, ``zt = (X - mean) @ inv(chol(S))'``
with ``S`` the sample covariance (divisor n-1). This equals the quadratic form
in the raw covariates because the whitening factor satisfies ``A A' = inv(S)``.
Storing ``zt`` instead of the n-by-n quadratic-form matrix keeps memory at
O(np) and makes a treated/control swap an O(p) update of the running treated
row-sum, which is what every sampler's hot loop relies on.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.linalg import solve_triangular

from .design import (
    ClusterStructure,
    DesignSpec,
    SequentialStructure,
    SimpleStructure,
    StratifiedStructure,
    Structure,
)
from .errors import (
    ConfigError,
    DimensionMismatch,
    InfeasibleAssignment,
    InvalidSwap,
    RankDeficient,
    StageMismatch,
)

PIVOT_RTOL = 1e-10
DENSE_H_DEFAULT = 2048

# When set, every apply_swap re-derives M from scratch and asserts agreement
# with the incremental value (relative 1e-8). Costs O(np) per swap.
VALIDATE_STATE = os.environ.get("RERAND_VALIDATE_STATE", "") == "1"


@dataclass(frozen=True)
class CovariateMatrix:
    """Dense n-by-p covariate matrix with cached column means."""

    values: np.ndarray
    column_means: np.ndarray = field(init=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise DimensionMismatch(f"covariates must be 2-d, got shape {vals.shape}")
        n, p = vals.shape
        if n < 2 or p < 1:
            raise DimensionMismatch(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if not np.all(np.isfinite(vals)):
            raise DimensionMismatch("covariates contain non-finite entries")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "column_means", vals.mean(axis=0))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


def _whiten(values: np.ndarray, ridge: Optional[float]) -> np.ndarray:
    """Whitened matrix zt with zt' zt = (n-1) I, via Cholesky of the covariance."""
    n, p = values.shape
    if ridge is None and n - 1 < p:
        raise RankDeficient(
            f"sample covariance cannot have full rank with n-1 < p (n={n}, p={p}); "
            "reduce covariates or enable the ridge option"
        )
    centered = values - values.mean(axis=0)
    sxx = centered.T @ centered / (n - 1)
    if ridge is not None:
        sxx = sxx + ridge * np.eye(p)
    try:
        lower = np.linalg.cholesky(sxx)
    except np.linalg.LinAlgError as err:
        raise RankDeficient(
            "covariance factorization failed; covariates are collinear "
            "(a ridge term can be enabled via build_problem(..., ridge=...))"
        ) from err
    pivots = np.diag(lower) ** 2
    if pivots.min() < PIVOT_RTOL * np.diag(sxx).max():
        raise RankDeficient(
            f"covariance pivot {pivots.min():.3e} below tolerance; "
            "covariates are collinear"
        )
    return np.ascontiguousarray(solve_triangular(lower, centered.T, lower=True).T)


@dataclass(frozen=True)
class StageData:
    """Per-stage whitened representation for sequential designs.

    Stage k re-whitens the first ``n_cum`` rows with their own mean and
    covariance, because the accumulated covariance changes as groups arrive.
    """

    whitened: np.ndarray  # (n_cum, p)
    n_cum: int
    n_treat_cum: int
    n_free: int
    n_treat_free: int

    @property
    def scale(self) -> float:
        return self.n_cum / (self.n_treat_cum * (self.n_cum - self.n_treat_cum))

    @property
    def total(self) -> np.ndarray:
        return self.whitened.sum(axis=0)


@dataclass(frozen=True)
class BalanceProblem:
    """Immutable preprocessed instance shared by all samplers."""

    covariates: CovariateMatrix
    structure: Structure
    whitened: np.ndarray
    h_vec: np.ndarray
    max_dense_h: int = DENSE_H_DEFAULT
    stages: tuple[StageData, ...] = ()
    cluster_whitened_sums: Optional[np.ndarray] = None  # (K, p)
    cluster_sizes: Optional[np.ndarray] = None  # (K,)

    @property
    def n(self) -> int:
        return self.covariates.n

    @property
    def p(self) -> int:
        return self.covariates.p

    @property
    def n_treat(self) -> int:
        return self.structure.n_treat

    @property
    def n_control(self) -> int:
        return self.n - self.n_treat

    @property
    def group_sizes(self) -> tuple[int, int]:
        return (self.n_treat, self.n_control)

    @property
    def scale(self) -> float:
        return self.n / (self.n_treat * self.n_control)

    @property
    def total_whitened(self) -> np.ndarray:
        return self.whitened.sum(axis=0)

    def center(self, n_treat: Optional[int] = None) -> np.ndarray:
        nt = self.n_treat if n_treat is None else n_treat
        return (nt / self.n) * self.total_whitened

    def h_entry(self, i: int, j: int) -> float:
        """Quadratic-form matrix entry H[i, j], computed on demand in O(p)."""
        return self.scale * float(self.whitened[i] @ self.whitened[j])

    def dense_h(self) -> np.ndarray:
        """Full n-by-n quadratic-form matrix; refused for large n.

        Materializing H defeats the O(np) memory contract, so this exists only
        for small-instance verification.
        """
        if self.n > self.max_dense_h:
            raise ConfigError(
                f"dense H refused for n={self.n} > max_dense_h={self.max_dense_h}"
            )
        return self.scale * (self.whitened @ self.whitened.T)

    # -- feasibility ---------------------------------------------------------

    def check_feasible(self, w: np.ndarray) -> None:
        """Raise InfeasibleAssignment unless w satisfies the structure."""
        w = np.asarray(w)
        if w.shape != (self.n,):
            raise InfeasibleAssignment(
                f"assignment length {w.shape} does not match n={self.n}"
            )
        if not np.all((w == 0) | (w == 1)):
            raise InfeasibleAssignment("assignment entries must be 0 or 1")
        s = self.structure
        if isinstance(s, SimpleStructure):
            if int(w.sum()) != s.n_treat:
                raise InfeasibleAssignment(
                    f"treated count {int(w.sum())} != n_treat {s.n_treat}"
                )
        elif isinstance(s, SequentialStructure):
            bounds = s.boundaries()
            for k in range(s.n_stages):
                got = int(w[bounds[k] : bounds[k + 1]].sum())
                if got != s.stage_treated[k]:
                    raise InfeasibleAssignment(
                        f"stage {k + 1} treated count {got} != {s.stage_treated[k]}"
                    )
        elif isinstance(s, StratifiedStructure):
            for k, idx in enumerate(s.strata):
                got = int(w[list(idx)].sum())
                if got != s.stratum_treated[k]:
                    raise InfeasibleAssignment(
                        f"stratum {k} treated count {got} != {s.stratum_treated[k]}"
                    )
        elif isinstance(s, ClusterStructure):
            u = np.empty(s.n_clusters, dtype=np.int64)
            for k, idx in enumerate(s.clusters):
                vals = w[list(idx)]
                if not np.all(vals == vals[0]):
                    raise InfeasibleAssignment(f"cluster {k} is not assignment-constant")
                u[k] = vals[0]
            if int(u.sum()) != s.n_treat_clusters:
                raise InfeasibleAssignment(
                    f"treated cluster count {int(u.sum())} != {s.n_treat_clusters}"
                )
        else:  # pragma: no cover
            raise TypeError(f"unknown structure {type(s)}")

    def cluster_indicator(self, w: np.ndarray) -> np.ndarray:
        """Collapse a feasible unit-level w to the cluster 0/1 vector."""
        s = self.structure
        if not isinstance(s, ClusterStructure):
            raise InfeasibleAssignment("not a cluster problem")
        return np.array([w[idx[0]] for idx in s.clusters], dtype=np.int8)


def build_problem(
    x: Union[CovariateMatrix, np.ndarray],
    design: Union[DesignSpec, Structure],
    *,
    ridge: Optional[float] = None,
    max_dense_h: int = DENSE_H_DEFAULT,
) -> BalanceProblem:
    """Preprocess covariates for a design: whiten once, cache structure data.

    Parameters
    ----------
    x : CovariateMatrix or (n, p) array
    design : DesignSpec or a bare structure
    ridge : optional nonnegative diagonal loading added to the covariance
        before factorization, for collinear covariates. Off by default.
    max_dense_h : largest n for which ``dense_h()`` may materialize H.

    Raises
    ------
    RankDeficient : singular covariance (or n-1 <= p without ridge).
    DimensionMismatch : design sizes inconsistent with the data.
    """
    if not isinstance(x, CovariateMatrix):
        x = CovariateMatrix(np.asarray(x))
    structure = design.structure if isinstance(design, DesignSpec) else design
    if structure.n != x.n:
        raise DimensionMismatch(
            f"structure describes {structure.n} units but covariates have {x.n} rows"
        )
    if ridge is not None and ridge < 0:
        raise ConfigError("ridge must be nonnegative")

    whitened = _whiten(x.values, ridge)
    n, n_t = x.n, structure.n_treat
    # h = 2 (n_t/n) H 1; with centered whitening this is numerically ~0 but it
    # is part of the quadratic-form update identity, so it is kept explicit.
    total = whitened.sum(axis=0)
    scale = n / (n_t * (n - n_t))
    h_vec = 2.0 * (n_t / n) * scale * (whitened @ total)

    stages: tuple[StageData, ...] = ()
    cluster_sums = None
    cluster_sizes = None
    if isinstance(structure, SequentialStructure):
        bounds = structure.boundaries()
        out = []
        for k in range(structure.n_stages):
            n_cum = int(bounds[k + 1])
            nt_cum = sum(structure.stage_treated[: k + 1])
            try:
                zk = _whiten(x.values[:n_cum], ridge)
            except RankDeficient as err:
                raise RankDeficient(
                    f"stage {k + 1} (first {n_cum} rows): {err}"
                ) from err
            out.append(
                StageData(
                    whitened=zk,
                    n_cum=n_cum,
                    n_treat_cum=nt_cum,
                    n_free=structure.stage_sizes[k],
                    n_treat_free=structure.stage_treated[k],
                )
            )
        stages = tuple(out)
        # full-horizon whitening coincides with the final stage's
        whitened = stages[-1].whitened
        total = whitened.sum(axis=0)
        h_vec = 2.0 * (n_t / n) * scale * (whitened @ total)
    elif isinstance(structure, ClusterStructure):
        cluster_sums = np.stack(
            [whitened[list(idx)].sum(axis=0) for idx in structure.clusters]
        )
        cluster_sizes = structure.sizes

    return BalanceProblem(
        covariates=x,
        structure=structure,
        whitened=whitened,
        h_vec=h_vec,
        max_dense_h=max_dense_h,
        stages=stages,
        cluster_whitened_sums=cluster_sums,
        cluster_sizes=cluster_sizes,
    )


# ---------------------------------------------------------------------------
# Objective evaluation
# ---------------------------------------------------------------------------


def _m_from_sum(problem: BalanceProblem, treated_sum: np.ndarray, n_treat: int) -> float:
    n = problem.n
    diff = treated_sum - (n_treat / n) * problem.total_whitened
    return (n / (n_treat * (n - n_treat))) * float(diff @ diff)


def mahalanobis(problem: BalanceProblem, w) -> float:
    """Imbalance M(w) of a feasible assignment, computed in O(np)."""
    w = np.asarray(w, dtype=np.float64)
    problem.check_feasible(w)
    treated_sum = w @ problem.whitened
    return _m_from_sum(problem, treated_sum, int(round(w.sum())))


def mahalanobis_many(problem: BalanceProblem, w_matrix: np.ndarray) -> np.ndarray:
    """Vectorized M over the rows of a (B, n) assignment matrix.

    Rows are not feasibility-checked; intended for enumeration tests and
    draw diagnostics where feasibility holds by construction.
    """
    w_matrix = np.asarray(w_matrix, dtype=np.float64)
    nts = w_matrix.sum(axis=1)
    sums = w_matrix @ problem.whitened
    diffs = sums - np.outer(nts / problem.n, problem.total_whitened)
    scales = problem.n / (nts * (problem.n - nts))
    return scales * np.einsum("ij,ij->i", diffs, diffs)


def cluster_mahalanobis(problem: BalanceProblem, u) -> float:
    """M of a cluster indicator, with the scaling recomputed from realized arms.

    With unequal cluster sizes neither arm has a fixed unit count, so the
    n/(n_t n_c) factor and the centering both use the realized treated count.
    """
    s = problem.structure
    if not isinstance(s, ClusterStructure):
        raise InfeasibleAssignment("not a cluster problem")
    u = np.asarray(u)
    if u.shape != (s.n_clusters,):
        raise InfeasibleAssignment(
            f"cluster indicator length {u.shape} != K={s.n_clusters}"
        )
    if not np.all((u == 0) | (u == 1)):
        raise InfeasibleAssignment("cluster indicator entries must be 0 or 1")
    if int(u.sum()) != s.n_treat_clusters:
        raise InfeasibleAssignment(
            f"treated cluster count {int(u.sum())} != {s.n_treat_clusters}"
        )
    mask = np.asarray(u, dtype=bool)
    treated_sum = problem.cluster_whitened_sums[mask].sum(axis=0)
    n_treat = int(problem.cluster_sizes[mask].sum())
    return _m_from_sum(problem, treated_sum, n_treat)


def expand_cluster_assignment(problem: BalanceProblem, u) -> np.ndarray:
    """Unit-level 0/1 vector W(U) for a cluster indicator."""
    s = problem.structure
    w = np.zeros(problem.n, dtype=np.int8)
    for k, idx in enumerate(s.clusters):
        if u[k]:
            w[list(idx)] = 1
    return w


def sequential_mahalanobis(problem: BalanceProblem, w_prefix) -> float:
    """Stage objective M_[k] for a prefix covering the first k stages.

    The prefix length must equal a stage boundary; the first k groups are
    re-whitened with their own mean and covariance (divisor n_[k] - 1).
    """
    s = problem.structure
    if not isinstance(s, SequentialStructure):
        raise StageMismatch("not a sequential problem")
    w_prefix = np.asarray(w_prefix, dtype=np.float64)
    bounds = s.boundaries()
    matches = np.flatnonzero(bounds[1:] == w_prefix.shape[0])
    if matches.size == 0:
        raise StageMismatch(
            f"prefix length {w_prefix.shape[0]} is not a stage boundary "
            f"(boundaries: {list(bounds[1:])})"
        )
    k = int(matches[0])
    for g in range(k + 1):
        got = int(w_prefix[bounds[g] : bounds[g + 1]].sum())
        if got != s.stage_treated[g]:
            raise InfeasibleAssignment(
                f"stage {g + 1} treated count {got} != {s.stage_treated[g]}"
            )
    stage = problem.stages[k]
    treated_sum = w_prefix @ stage.whitened
    diff = treated_sum - (stage.n_treat_cum / stage.n_cum) * stage.total
    return stage.scale * float(diff @ diff)


# ---------------------------------------------------------------------------
# Mutable search state
# ---------------------------------------------------------------------------


@dataclass
class BalanceState:
    """Search state: current assignment plus caches for O(p) swap evaluation.

    Owned by a single search chain; never shared across threads. ``stage`` is
    the 1-based active stage for sequential problems (objective M_[stage]),
    with everything before the stage's block frozen.
    """

    problem: BalanceProblem
    assignment: np.ndarray  # (n,) int8
    m_value: float
    treated_whitened_sum: np.ndarray  # (p,), under the active whitening
    stage: Optional[int] = None
    cluster_indicator: Optional[np.ndarray] = None  # (K,) int8
    realized_n_treat: Optional[int] = None

    def _stage_data(self) -> StageData:
        return self.problem.stages[self.stage - 1]


def init_state(problem: BalanceProblem, w, stage: Optional[int] = None) -> BalanceState:
    """Build a BalanceState with caches populated from scratch.

    For sequential problems ``stage`` selects the active objective M_[stage]
    (default: the final stage); ``w`` entries beyond the stage boundary are
    ignored and stored as zero.
    """
    s = problem.structure
    w = np.asarray(w)
    if isinstance(s, SequentialStructure):
        k = s.n_stages if stage is None else int(stage)
        if not 1 <= k <= s.n_stages:
            raise StageMismatch(f"stage {k} out of range 1..{s.n_stages}")
        bounds = s.boundaries()
        n_cum = int(bounds[k])
        if w.shape[0] == problem.n:
            prefix = w[:n_cum]
        elif w.shape[0] == n_cum:
            prefix = w
        else:
            raise StageMismatch(
                f"assignment length {w.shape[0]} matches neither n={problem.n} "
                f"nor the stage boundary {n_cum}"
            )
        m = sequential_mahalanobis(problem, prefix)  # validates counts
        stage_data = problem.stages[k - 1]
        full = np.zeros(problem.n, dtype=np.int8)
        full[:n_cum] = prefix
        return BalanceState(
            problem=problem,
            assignment=full,
            m_value=m,
            treated_whitened_sum=prefix.astype(np.float64) @ stage_data.whitened,
            stage=k,
        )
    if stage is not None:
        raise StageMismatch("stage is only meaningful for sequential problems")
    problem.check_feasible(w)
    if isinstance(s, ClusterStructure):
        u = problem.cluster_indicator(w)
        mask = u.astype(bool)
        treated_sum = problem.cluster_whitened_sums[mask].sum(axis=0)
        nt = int(problem.cluster_sizes[mask].sum())
        return BalanceState(
            problem=problem,
            assignment=w.astype(np.int8),
            m_value=_m_from_sum(problem, treated_sum, nt),
            treated_whitened_sum=treated_sum,
            cluster_indicator=u,
            realized_n_treat=nt,
        )
    treated_sum = w.astype(np.float64) @ problem.whitened
    return BalanceState(
        problem=problem,
        assignment=w.astype(np.int8),
        m_value=_m_from_sum(problem, treated_sum, problem.n_treat),
        treated_whitened_sum=treated_sum,
    )


def _stratum_of(structure: StratifiedStructure, pos: int) -> int:
    for k, idx in enumerate(structure.strata):
        if pos in idx:
            return k
    raise InvalidSwap(f"position {pos} belongs to no stratum")


def _check_swap(state: BalanceState, treated_pos: int, control_pos: int) -> None:
    s = state.problem.structure
    if isinstance(s, ClusterStructure):
        k = s.n_clusters
        if not (0 <= treated_pos < k and 0 <= control_pos < k):
            raise InvalidSwap("cluster swap positions out of range")
        if state.cluster_indicator[treated_pos] != 1:
            raise InvalidSwap(f"cluster {treated_pos} is not treated")
        if state.cluster_indicator[control_pos] != 0:
            raise InvalidSwap(f"cluster {control_pos} is not control")
        return
    if isinstance(s, SequentialStructure):
        bounds = s.boundaries()
        lo, hi = int(bounds[state.stage - 1]), int(bounds[state.stage])
        if not (lo <= treated_pos < hi and lo <= control_pos < hi):
            raise InvalidSwap(
                f"swap positions must lie in the active stage block [{lo}, {hi})"
            )
    else:
        if not (0 <= treated_pos < state.problem.n and 0 <= control_pos < state.problem.n):
            raise InvalidSwap("swap positions out of range")
    if state.assignment[treated_pos] != 1:
        raise InvalidSwap(f"position {treated_pos} is not treated")
    if state.assignment[control_pos] != 0:
        raise InvalidSwap(f"position {control_pos} is not control")
    if isinstance(s, StratifiedStructure):
        if _stratum_of(s, treated_pos) != _stratum_of(s, control_pos):
            raise InvalidSwap("stratified swaps must stay within one stratum")


def _swap_new_m(state: BalanceState, treated_pos: int, control_pos: int) -> float:
    """M after swapping, from the cached treated sum, in O(p)."""
    problem = state.problem
    s = problem.structure
    if isinstance(s, ClusterStructure):
        new_sum = (
            state.treated_whitened_sum
            - problem.cluster_whitened_sums[treated_pos]
            + problem.cluster_whitened_sums[control_pos]
        )
        new_nt = (
            state.realized_n_treat
            - int(problem.cluster_sizes[treated_pos])
            + int(problem.cluster_sizes[control_pos])
        )
        return _m_from_sum(problem, new_sum, new_nt)
    if isinstance(s, SequentialStructure):
        stage = state._stage_data()
        zt = stage.whitened
        new_sum = state.treated_whitened_sum - zt[treated_pos] + zt[control_pos]
        diff = new_sum - (stage.n_treat_cum / stage.n_cum) * stage.total
        return stage.scale * float(diff @ diff)
    zt = problem.whitened
    new_sum = state.treated_whitened_sum - zt[treated_pos] + zt[control_pos]
    return _m_from_sum(problem, new_sum, problem.n_treat)


def swap_delta(state: BalanceState, treated_pos: int, control_pos: int) -> float:
    """Change in M if the treated/control pair were swapped. Does not mutate.

    Equivalent to the quadratic-form row-update identity; the equivalence is
    exercised directly in the test suite against both a dense-H evaluation and
    full recomputation.
    """
    _check_swap(state, treated_pos, control_pos)
    return _swap_new_m(state, treated_pos, control_pos) - state.m_value


def apply_swap(state: BalanceState, treated_pos: int, control_pos: int) -> BalanceState:
    """Swap the pair in place, updating caches in O(p); returns the state."""
    _check_swap(state, treated_pos, control_pos)
    problem = state.problem
    s = problem.structure
    if isinstance(s, ClusterStructure):
        state.treated_whitened_sum = (
            state.treated_whitened_sum
            - problem.cluster_whitened_sums[treated_pos]
            + problem.cluster_whitened_sums[control_pos]
        )
        state.realized_n_treat += int(problem.cluster_sizes[control_pos]) - int(
            problem.cluster_sizes[treated_pos]
        )
        state.cluster_indicator[treated_pos] = 0
        state.cluster_indicator[control_pos] = 1
        for i in s.clusters[treated_pos]:
            state.assignment[i] = 0
        for i in s.clusters[control_pos]:
            state.assignment[i] = 1
        state.m_value = _m_from_sum(
            problem, state.treated_whitened_sum, state.realized_n_treat
        )
    else:
        zt = (
            state._stage_data().whitened
            if isinstance(s, SequentialStructure)
            else problem.whitened
        )
        state.treated_whitened_sum = (
            state.treated_whitened_sum - zt[treated_pos] + zt[control_pos]
        )
        state.assignment[treated_pos] = 0
        state.assignment[control_pos] = 1
        if isinstance(s, SequentialStructure):
            stage = state._stage_data()
            diff = (
                state.treated_whitened_sum
                - (stage.n_treat_cum / stage.n_cum) * stage.total
            )
            state.m_value = stage.scale * float(diff @ diff)
        else:
            state.m_value = _m_from_sum(
                problem, state.treated_whitened_sum, problem.n_treat
            )
    if VALIDATE_STATE:
        _validate_state(state)
    return state


def _validate_state(state: BalanceState) -> None:
    s = state.problem.structure
    if isinstance(s, SequentialStructure):
        bounds = s.boundaries()
        fresh = sequential_mahalanobis(
            state.problem, state.assignment[: int(bounds[state.stage])]
        )
    elif isinstance(s, ClusterStructure):
        fresh = cluster_mahalanobis(state.problem, state.cluster_indicator)
    else:
        fresh = mahalanobis(state.problem, state.assignment)
    tol = 1e-8 * max(1.0, abs(state.m_value))
    if abs(fresh - state.m_value) > tol:
        raise AssertionError(
            f"incremental m_value {state.m_value!r} drifted from fresh {fresh!r}"
        )
