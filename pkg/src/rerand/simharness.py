"""Synthetic-data generation and benchmark orchestration.

Scenarios mirror the standard setup: covariates iid standard normal, control
outcomes from the linear model Y(0) = sum_j X_ij + eps with eps ~ N(0, p)
(so Var[Y(0)] = 2p), and an additive treatment effect expressed as a
multiple of sqrt(Var[Y(0)]). A benchmark replication draws one design
assignment, realizes outcomes, runs the randomization test at level alpha
under both the null projection and the realized effect, and inverts tests
for a confidence interval; rows aggregate bias, SD, size, power, coverage,
length, sampling time, and the randomness metric.

All replication inputs derive from the scenario master seed, so identical
scenarios reproduce bit-identical rows (timing fields excluded).
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .chisq import SequentialThresholdSpec, chisq_quantile
from .core import BalanceProblem, build_problem
from .design import (
    SequentialStructure,
    SimpleStructure,
    Structure,
    contiguous_clusters,
    contiguous_strata,
)
from .errors import ConfigError
from .inference import (
    OutcomeData,
    as_assignment_matrix,
    ci_bounds,
    diff_in_means,
    frt_pvalue,
    randomness_metric,
)
from .samplers import (
    METHODS,
    SamplerConfig,
    derive_stream_seeds,
    sample_batch,
    sample_one,
)

_DATA_SALT = 0xD47A
_DESIGN_SALT = 0xDE51
_ANALYSIS_SALT = 0xA7A1
_CI_SALT = 0xC1C1
_TIMING_SALT = 0x7133


def gen_synthetic(n: int, p: int, rng: np.random.Generator, effect_multiplier: float = 0.0):
    """Covariates, potential outcomes, and the true effect for one dataset.

    Returns (x, y0, y1, tau) with tau = effect_multiplier * sqrt(2 p).
    """
    if n < 1 or p < 1:
        raise ConfigError("n and p must be positive")
    x = rng.standard_normal((n, p))
    eps = rng.standard_normal(n) * np.sqrt(p)
    y0 = x.sum(axis=1) + eps
    tau = effect_multiplier * np.sqrt(2.0 * p)
    y1 = y0 + tau
    return x, y0, y1, float(tau)


@dataclass
class SimScenario:
    """One benchmark configuration; JSON-serializable."""

    n: int
    p: int
    structure: dict
    effect_multiplier: float = 0.0
    p_a: Optional[float] = 1e-3
    threshold: Optional[float] = None
    stage_shares: Optional[tuple[int, ...]] = None
    methods: tuple[str, ...] = ("cr", "vnsrr")
    replications: int = 200
    draws_per_replication: int = 500
    alpha: float = 0.1
    ci_alpha: float = 0.05
    master_seed: int = 0
    local_pairs: Optional[int] = None
    shake_pairs: Optional[int] = None
    gamma: float = 20.0
    max_iterations: int = 10_000_000
    ln_draws: Optional[int] = None
    run_inference: bool = True

    def __post_init__(self):
        self.methods = tuple(self.methods)
        if self.stage_shares is not None:
            self.stage_shares = tuple(int(s) for s in self.stage_shares)
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if len([v for v in (self.p_a, self.threshold, self.stage_shares) if v is not None]) != 1:
            raise ConfigError("specify exactly one of p_a / threshold / stage_shares")
        if self.replications < 1 or self.draws_per_replication < 1:
            raise ConfigError("replications and draws_per_replication must be >= 1")

    def build_structure(self) -> Structure:
        kind = self.structure.get("kind")
        if kind == "simple":
            return SimpleStructure(self.n, int(self.structure.get("n_treat", self.n // 2)))
        if kind == "sequential":
            sizes = [int(v) for v in self.structure["stage_sizes"]]
            treated = self.structure.get("stage_treated")
            treated = [s // 2 for s in sizes] if treated is None else [int(v) for v in treated]
            st = SequentialStructure(tuple(sizes), tuple(treated))
        elif kind == "stratified":
            sizes = [int(v) for v in self.structure["sizes"]]
            treated = self.structure.get("treated")
            treated = [s // 2 for s in sizes] if treated is None else [int(v) for v in treated]
            st = contiguous_strata(sizes, treated)
        elif kind == "cluster":
            sizes = [int(v) for v in self.structure["sizes"]]
            kt = int(self.structure.get("n_treat_clusters", len(sizes) // 2))
            st = contiguous_clusters(sizes, kt)
        else:
            raise ConfigError(f"unknown structure kind {kind!r}")
        if st.n != self.n:
            raise ConfigError(f"structure covers {st.n} units but scenario has n={self.n}")
        return st

    def thresholds(self):
        """Threshold argument for the samplers (scalar or per-stage schedule)."""
        if self.stage_shares is not None:
            sizes = tuple(int(v) for v in self.structure["stage_sizes"])
            return SequentialThresholdSpec(self.stage_shares, self.p, sizes)
        if self.threshold is not None:
            return self.threshold
        return chisq_quantile(self.p, self.p_a)

    def sampler_config(self, method: str) -> SamplerConfig:
        return SamplerConfig(
            method=method,
            local_pairs=self.local_pairs,
            shake_pairs=self.shake_pairs,
            gamma=self.gamma,
            max_iterations=self.max_iterations,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SimScenario":
        raw = json.loads(text)
        known = {f for f in cls.__dataclass_fields__}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown scenario fields: {sorted(extra)}")
        return cls(**raw)


@dataclass
class BenchRow:
    """Aggregated statistics for one method (natural units)."""

    method: str
    bias: float
    sd: float
    size: float
    power: float
    coverage: float
    length: float
    run_time_seconds: float
    l_n: float


def _rep_dataset(scenario: SimScenario, rep: int):
    seed = int(derive_stream_seeds(scenario.master_seed ^ _DATA_SALT, rep, 1)[0])
    rng = np.random.default_rng(seed)
    return gen_synthetic(scenario.n, scenario.p, rng, scenario.effect_multiplier)


def _one_replication(scenario: SimScenario, method: str, method_idx: int, rep: int):
    x, y0, y1, tau = _rep_dataset(scenario, rep)
    problem = build_problem(x, scenario.build_structure())
    thresholds = scenario.thresholds()
    config = scenario.sampler_config(method)
    key = scenario.master_seed ^ (method_idx << 32)
    design_seed = int(derive_stream_seeds(key ^ _DESIGN_SALT, rep, 1)[0])
    draw = sample_one(problem, thresholds, config, np.random.default_rng(design_seed))
    w = draw.assignment
    y_alt = np.where(w == 1, y1, y0)
    tau_hat = diff_in_means(OutcomeData(y_alt, w))
    if not scenario.run_inference:
        return tau_hat, np.nan, np.nan, np.nan, np.nan
    analysis_seed = int(derive_stream_seeds(key ^ _ANALYSIS_SALT, rep, 1)[0])
    mat = as_assignment_matrix(
        sample_batch(problem, thresholds, config, scenario.draws_per_replication,
                     master_seed=analysis_seed)
    )
    pv_null = frt_pvalue(OutcomeData(y0, w), mat)
    pv_alt = frt_pvalue(OutcomeData(y_alt, w), mat)
    ci_seed = int(derive_stream_seeds(key ^ _CI_SALT, rep, 1)[0])

    def draw_fn(count, seed):
        return as_assignment_matrix(
            sample_batch(problem, thresholds, config, count, master_seed=seed)
        )

    lo, hi = ci_bounds(
        OutcomeData(y_alt, w),
        draw_fn,
        scenario.ci_alpha,
        scenario.draws_per_replication,
        master_seed=ci_seed,
    )
    return (
        tau_hat,
        float(pv_null <= scenario.alpha),
        float(pv_alt <= scenario.alpha),
        float(lo <= tau <= hi),
        hi - lo,
    )


def _rep_worker(args):
    scenario, method, method_idx, rep = args
    return rep, _one_replication(scenario, method, method_idx, rep)


def _timing_problem(scenario: SimScenario):
    seed = int(derive_stream_seeds(scenario.master_seed ^ _TIMING_SALT, 0, 1)[0])
    rng = np.random.default_rng(seed)
    x, _, _, _ = gen_synthetic(scenario.n, scenario.p, rng, scenario.effect_multiplier)
    return build_problem(x, scenario.build_structure())


def time_batch(scenario: SimScenario, method: str, count: Optional[int] = None) -> float:
    """Seconds to sample ``count`` acceptable assignments (single worker).

    Only the sampling call is timed; data generation and inference are not
    part of the measurement.
    """
    problem = _timing_problem(scenario)
    thresholds = scenario.thresholds()
    config = scenario.sampler_config(method)
    count = scenario.draws_per_replication if count is None else count
    seed = int(derive_stream_seeds(scenario.master_seed ^ _TIMING_SALT, 1, 1)[0])
    t0 = time.perf_counter()
    sample_batch(problem, thresholds, config, count, master_seed=seed, workers=1)
    return time.perf_counter() - t0


def method_l_n(scenario: SimScenario, method: str, count: Optional[int] = None) -> float:
    """Randomness metric over a fresh batch on the timing dataset."""
    problem = _timing_problem(scenario)
    thresholds = scenario.thresholds()
    config = scenario.sampler_config(method)
    count = (
        count
        if count is not None
        else (scenario.ln_draws or scenario.draws_per_replication)
    )
    seed = int(derive_stream_seeds(scenario.master_seed ^ _TIMING_SALT, 2, 1)[0])
    draws = sample_batch(problem, thresholds, config, count, master_seed=seed)
    return randomness_metric(draws)


def run_benchmark(
    scenario: SimScenario,
    workers: int = 1,
    timing: bool = True,
    timing_count: Optional[int] = None,
) -> list[BenchRow]:
    """One BenchRow per scenario method.

    ``workers`` fans replications out across processes; results are identical
    to a serial run because every replication's seeds derive from its index.
    Timing and the randomness metric always run on a single worker.
    """
    rows = []
    for method_idx, method in enumerate(scenario.methods):
        reps = range(scenario.replications)
        if workers > 1 and scenario.replications >= 4:
            results = [None] * scenario.replications
            jobs = [(scenario, method, method_idx, r) for r in reps]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for rep, out in pool.map(_rep_worker, jobs, chunksize=16):
                    results[rep] = out
        else:
            results = [_one_replication(scenario, method, method_idx, r) for r in reps]
        arr = np.asarray(results, dtype=np.float64)
        tau = float(scenario.effect_multiplier * np.sqrt(2.0 * scenario.p))
        tau_hats = arr[:, 0]

        def col_mean(j):
            col = arr[:, j]
            col = col[np.isfinite(col)]
            return float(col.mean()) if col.size else float("nan")

        row = BenchRow(
            method=method,
            bias=abs(float(tau_hats.mean()) - tau),
            sd=float(tau_hats.std(ddof=1)) if len(tau_hats) > 1 else 0.0,
            size=col_mean(1),
            power=col_mean(2),
            coverage=col_mean(3),
            length=col_mean(4),
            run_time_seconds=time_batch(scenario, method, timing_count) if timing else float("nan"),
            l_n=method_l_n(scenario, method) if timing else float("nan"),
        )
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Monte Carlo verification of the unbiasedness / variance-reduction claims
# ---------------------------------------------------------------------------


@dataclass
class TheoremReport:
    """Fixed-dataset Monte Carlo diagnostics for one method."""

    method: str
    tau: float
    tau_hat_mean: float
    bias: float
    se: float
    v_cr: float
    v_method: float
    realized_reduction: float
    bound: float
    sigma_mc: float
    r2_hat: float
    sd_ratio: float


def verify_theorems(scenario: SimScenario, draws: Optional[int] = None) -> list[TheoremReport]:
    """Monte Carlo check of unbiasedness and the variance-reduction bound.

    Both claims condition on the potential outcomes, so one fixed dataset is
    generated from the scenario seed and ``draws`` assignments are redrawn per
    method. The reduction bound (1 - a/p) R^2 uses the least-squares
    projection of Y(0) on (1, X) and the CR draw variance; the Monte Carlo
    slack follows the normal approximation for variance ratios.
    """
    draws = scenario.replications if draws is None else draws
    rng = np.random.default_rng(
        int(derive_stream_seeds(scenario.master_seed ^ _DATA_SALT, 0, 1)[0])
    )
    x, y0, y1, tau = gen_synthetic(scenario.n, scenario.p, rng, scenario.effect_multiplier)
    problem = build_problem(x, scenario.build_structure())
    thresholds = scenario.thresholds()

    def tau_hats(method, salt):
        config = scenario.sampler_config(method)
        seed = int(derive_stream_seeds(scenario.master_seed ^ salt, 0, 1)[0])
        mat = as_assignment_matrix(
            sample_batch(problem, thresholds, config, draws, master_seed=seed)
        ).astype(np.float64)
        n_t = mat.sum(axis=1)
        return (mat @ y1) / n_t - ((1.0 - mat) @ y0) / (scenario.n - n_t)

    cr_taus = tau_hats("cr", _DESIGN_SALT)
    v_cr = float(cr_taus.var(ddof=1))
    # projection of Y(0) on (1, X) for the reduction bound
    design = np.column_stack([np.ones(scenario.n), x])
    beta = np.linalg.lstsq(design, y0, rcond=None)[0][1:]
    centered = x - x.mean(axis=0)
    sxx = centered.T @ centered / (scenario.n - 1)
    structure = scenario.build_structure()
    n_t = structure.n_treat
    n_c = scenario.n - n_t
    r2_hat = float(scenario.n * beta @ sxx @ beta / (n_t * n_c * v_cr))
    a_val = scenario.thresholds()
    a_for_bound = float(a_val) if np.isscalar(a_val) or isinstance(a_val, float) else float("nan")

    reports = []
    for idx, method in enumerate(scenario.methods):
        taus = cr_taus if method == "cr" else tau_hats(method, _ANALYSIS_SALT + idx)
        v_m = float(taus.var(ddof=1))
        realized = (v_cr - v_m) / v_cr
        sigma_mc = (v_m / v_cr) * 2.0 / np.sqrt(draws - 1)
        bound = (
            (1.0 - a_for_bound / scenario.p) * r2_hat
            if np.isfinite(a_for_bound)
            else float("nan")
        )
        reports.append(
            TheoremReport(
                method=method,
                tau=tau,
                tau_hat_mean=float(taus.mean()),
                bias=float(taus.mean()) - tau,
                se=float(taus.std(ddof=1) / np.sqrt(draws)),
                v_cr=v_cr,
                v_method=v_m,
                realized_reduction=realized,
                bound=bound,
                sigma_mc=float(sigma_mc),
                r2_hat=r2_hat,
                sd_ratio=float(np.sqrt(v_m / v_cr)),
            )
        )
    return reports
