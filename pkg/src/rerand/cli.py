"""Command-line interface: assign / sample / infer / bench.

Covariates arrive as a headed CSV; the reserved columns ``stratum`` and
``cluster`` switch on the corresponding design, ``--stage-sizes`` switches on
the sequential design. Every run is replayable: all randomness flows from
``--seed``, and when the flag is absent the entropy-chosen seed is printed.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import io as rio
from .chisq import SequentialThresholdSpec, chisq_quantile
from .core import build_problem
from .design import (
    ClusterStructure,
    SequentialStructure,
    SimpleStructure,
    StratifiedStructure,
)
from .errors import (
    BracketFailed,
    ConfigError,
    ConfigInvalid,
    DegenerateSample,
    DimensionMismatch,
    EmptyArm,
    InfeasibleAssignment,
    InvalidSwap,
    IterationBudgetExceeded,
    ParseError,
    RankDeficient,
    RerandError,
    StageMismatch,
)
from .inference import (
    InferenceReport,
    OutcomeData,
    as_assignment_matrix,
    ci_bounds,
    diff_in_means,
    frt_pvalue,
    randomness_metric,
)
from .samplers import METHODS, SamplerConfig, derive_stream_seeds, sample_batch, sample_one
from .simharness import SimScenario, run_benchmark

_EXIT_CODES = [
    ((ConfigError, ConfigInvalid), 2),
    ((ParseError,), 3),
    ((RankDeficient,), 4),
    ((InfeasibleAssignment, InvalidSwap, StageMismatch, DimensionMismatch), 5),
    ((IterationBudgetExceeded,), 6),
    ((BracketFailed, DegenerateSample, EmptyArm), 7),
    ((RerandError,), 1),
]


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated number list, got {text!r}") from None


def _add_design_flags(sub):
    sub.add_argument("covariates", help="covariate CSV (header row; reserved columns: stratum, cluster)")
    sub.add_argument("--structure", help="optional CSV supplying stratum/cluster labels")
    sub.add_argument("--method", choices=METHODS, default="vnsrr")
    sub.add_argument("--pa", type=float, help="acceptance probability; threshold = chi-square quantile")
    sub.add_argument("--threshold", type=float, help="explicit imbalance threshold")
    sub.add_argument("--stage-thresholds", help="explicit per-stage thresholds a1,a2,...")
    sub.add_argument("--stage-shares", help="per-stage shares s1,s2,... for the sequential schedule")
    sub.add_argument("--stage-sizes", help="sequential stage sizes n1,n2,...")
    sub.add_argument("--stage-treated", help="per-stage treated counts (default: halves)")
    sub.add_argument("--nt", type=int, help="treated units (simple design; default n//2)")
    sub.add_argument("--kt", type=int, help="treated clusters (cluster design; default K//2)")
    sub.add_argument("--stratum-treated", help="per-stratum treated counts (default: halves)")
    sub.add_argument("--L", dest="local_pairs", type=int, help="local-search pairs per pass")
    sub.add_argument("--S", dest="shake_pairs", type=int, help="forced swaps per shake")
    sub.add_argument("--gamma", type=float, default=20.0, help="pair-switching acceptance exponent")
    sub.add_argument("--max-iter", dest="max_iter", type=int, default=10_000_000)
    sub.add_argument("--ridge", type=float, help="diagonal loading for collinear covariates")
    sub.add_argument("--seed", type=int, help="master seed (entropy-chosen and printed when absent)")


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return int(args.seed)
    seed = int(np.random.SeedSequence().entropy) & 0xFFFFFFFFFFFFFFFF
    print(f"seed: {seed}")
    return seed


def _resolve_structure(args, cov, labels):
    n = cov.n
    sequential = args.stage_sizes is not None
    strat_labels = labels.get("stratum")
    clust_labels = labels.get("cluster")
    chosen = [
        name
        for name, on in [
            ("sequential (--stage-sizes)", sequential),
            ("stratified ('stratum' column)", strat_labels is not None),
            ("cluster ('cluster' column)", clust_labels is not None),
        ]
        if on
    ]
    if len(chosen) > 1:
        raise ConfigError(f"structure over-specified: {' and '.join(chosen)}")
    if sequential:
        sizes = _int_list(args.stage_sizes)
        if sum(sizes) != n:
            raise ConfigError(f"stage sizes sum to {sum(sizes)}, expected n={n}")
        treated = (
            _int_list(args.stage_treated)
            if args.stage_treated
            else [s // 2 for s in sizes]
        )
        return SequentialStructure(tuple(sizes), tuple(treated))
    if strat_labels is not None:
        treated = (
            _int_list(args.stratum_treated)
            if args.stratum_treated
            else [len(g) // 2 for g in strat_labels]
        )
        return StratifiedStructure(tuple(strat_labels), tuple(treated))
    if clust_labels is not None:
        kt = args.kt if args.kt is not None else len(clust_labels) // 2
        return ClusterStructure(tuple(clust_labels), kt)
    nt = args.nt if args.nt is not None else n // 2
    return SimpleStructure(n, nt)


def _resolve_thresholds(args, structure, p):
    given = [
        name
        for name, v in [
            ("--pa", args.pa),
            ("--threshold", args.threshold),
            ("--stage-thresholds", args.stage_thresholds),
            ("--stage-shares", args.stage_shares),
        ]
        if v is not None
    ]
    if len(given) > 1:
        raise ConfigError(f"mutually exclusive flags: {' and '.join(given)}")
    if isinstance(structure, SequentialStructure):
        if args.stage_thresholds is not None:
            vals = _float_list(args.stage_thresholds)
            if len(vals) != structure.n_stages:
                raise ConfigError(
                    f"{len(vals)} stage thresholds for {structure.n_stages} stages"
                )
            return tuple(vals)
        if args.stage_shares is not None:
            shares = _int_list(args.stage_shares)
            return SequentialThresholdSpec(tuple(shares), p, structure.stage_sizes)
        if args.method == "cr":
            return None
        raise ConfigError("sequential designs need --stage-shares or --stage-thresholds")
    if args.stage_thresholds is not None or args.stage_shares is not None:
        raise ConfigError("stage threshold flags require --stage-sizes")
    if args.pa is not None:
        if not 0.0 < args.pa < 1.0:
            raise ConfigError("--pa must lie in (0, 1)")
        return chisq_quantile(p, args.pa)
    if args.threshold is not None:
        if args.threshold <= 0:
            raise ConfigError("--threshold must be positive")
        return float(args.threshold)
    if args.method == "cr":
        return None
    raise ConfigError("need --pa or --threshold (or --method cr)")


def _load_problem(args):
    cov, labels = rio.parse_covariates(args.covariates)
    if args.structure:
        extra = rio.load_structure_labels(args.structure)
        for key, val in extra.items():
            if key in labels:
                raise ConfigError(f"{key!r} labels given both inline and via --structure")
            labels[key] = val
    structure = _resolve_structure(args, cov, labels)
    problem = build_problem(cov, structure, ridge=args.ridge)
    thresholds = _resolve_thresholds(args, structure, cov.p)
    return problem, thresholds


def _sampler_config(args, seed) -> SamplerConfig:
    return SamplerConfig(
        method=args.method,
        local_pairs=args.local_pairs,
        shake_pairs=args.shake_pairs,
        gamma=args.gamma,
        max_iterations=args.max_iter,
        seed=seed,
    )


def cmd_assign(args) -> int:
    seed = _resolve_seed(args)
    problem, thresholds = _load_problem(args)
    config = _sampler_config(args, seed)
    draw = sample_one(problem, thresholds, config, np.random.default_rng(seed))
    rio.write_assignment_csv(args.out, draw.assignment)
    return 0


def cmd_sample(args) -> int:
    seed = _resolve_seed(args)
    problem, thresholds = _load_problem(args)
    config = _sampler_config(args, seed)
    draws = sample_batch(problem, thresholds, config, args.count, master_seed=seed,
                         workers=args.workers)
    rio.write_draws_csv(args.out, draws)
    return 0


def cmd_infer(args) -> int:
    seed = _resolve_seed(args)
    problem, thresholds = _load_problem(args)
    config = _sampler_config(args, seed)
    y = rio.parse_outcomes(args.outcomes)
    w_obs = rio.read_assignment_csv(args.assignment)
    if y.shape[0] != problem.n or w_obs.shape[0] != problem.n:
        raise DimensionMismatch(
            f"outcomes ({y.shape[0]}) and assignment ({w_obs.shape[0]}) must "
            f"cover all n={problem.n} units"
        )
    problem.check_feasible(w_obs)
    outcomes = OutcomeData(y, w_obs)
    draws = sample_batch(problem, thresholds, config, args.draws, master_seed=seed)
    p_value = frt_pvalue(
        outcomes,
        draws,
        theta=args.theta,
        centered=args.centered,
        plus_one=args.plus_one,
    )

    def draw_fn(count, s):
        return as_assignment_matrix(
            sample_batch(problem, thresholds, config, count, master_seed=s)
        )

    ci_seed = int(derive_stream_seeds(seed, 0xC1, 1)[0])
    ci = ci_bounds(outcomes, draw_fn, args.alpha, args.draws, master_seed=ci_seed)
    report = InferenceReport(
        tau_hat=diff_in_means(outcomes),
        p_value=p_value,
        ci=ci,
        alpha=args.alpha,
        draws_used=args.draws,
        l_n=randomness_metric(draws),
    )
    rio.write_inference_json(args.out, report, extra={"theta": args.theta, "seed": seed})
    return 0


def cmd_bench(args) -> int:
    with open(args.scenario) as fh:
        scenario = SimScenario.from_json(fh.read())
    rows = run_benchmark(scenario, workers=args.workers, timing=not args.no_timing)
    rio.write_bench_csv(args.out, rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rerand",
        description="Covariate-balanced treatment assignment and randomization inference",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("assign", help="draw one acceptable assignment")
    _add_design_flags(sub)
    sub.add_argument("--out", default="assignment.csv")
    sub.set_defaults(func=cmd_assign)

    sub = subs.add_parser("sample", help="draw a batch of acceptable assignments")
    _add_design_flags(sub)
    sub.add_argument("--count", type=int, default=1000)
    sub.add_argument("--workers", type=int, default=1)
    sub.add_argument("--out", default="draws.csv")
    sub.set_defaults(func=cmd_sample)

    sub = subs.add_parser("infer", help="randomization test, CI, randomness metric")
    _add_design_flags(sub)
    sub.add_argument("--outcomes", required=True, help="CSV with a column named 'y'")
    sub.add_argument("--assignment", required=True, help="observed assignment CSV")
    sub.add_argument("--alpha", type=float, default=0.05,
                     help="one-sided level; the interval has level 1 - 2*alpha")
    sub.add_argument("--draws", type=int, default=1000)
    sub.add_argument("--theta", type=float, default=0.0, help="hypothesized constant effect")
    sub.add_argument("--centered", action="store_true",
                     help="compare |tau - theta| instead of |tau|")
    sub.add_argument("--plus-one", action="store_true",
                     help="conservative (1+count)/(1+B) p-value")
    sub.add_argument("--out", default="inference.json")
    sub.set_defaults(func=cmd_infer)

    sub = subs.add_parser("bench", help="run a benchmark scenario file")
    sub.add_argument("--scenario", required=True, help="scenario JSON")
    sub.add_argument("--workers", type=int, default=1)
    sub.add_argument("--no-timing", action="store_true")
    sub.add_argument("--out", default="bench.csv")
    sub.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RerandError as err:
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
        for classes, code in _EXIT_CODES:
            if isinstance(err, classes):
                return code
        return 1  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
