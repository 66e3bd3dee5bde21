"""Covariate-balanced treatment assignment via local-search rerandomization.

Draws treatment assignments whose Mahalanobis covariate imbalance falls
below a threshold, for simple, sequential, stratified, and cluster designs,
and performs randomization-based inference over redrawn assignments.
"""

from .chisq import (
    SequentialThresholdSpec,
    ThresholdSpec,
    chisq_cdf,
    chisq_quantile,
    noncentral_chisq_cdf,
    noncentral_chisq_quantile,
    sequential_thresholds,
)
from .core import (
    BalanceProblem,
    BalanceState,
    CovariateMatrix,
    apply_swap,
    build_problem,
    cluster_mahalanobis,
    expand_cluster_assignment,
    init_state,
    mahalanobis,
    mahalanobis_many,
    sequential_mahalanobis,
    swap_delta,
)
from .design import (
    ClusterStructure,
    DesignSpec,
    SequentialStructure,
    SimpleStructure,
    StratifiedStructure,
    contiguous_clusters,
    contiguous_strata,
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
from .samplers import (
    AssignmentDraw,
    SamplerConfig,
    derive_stream_seeds,
    sample_arsrr,
    sample_batch,
    sample_clust_vnsrr,
    sample_cr,
    sample_one,
    sample_psrr,
    sample_seq_vnsrr,
    sample_strat_vnsrr,
    sample_vnsrr,
)
from .simharness import (
    BenchRow,
    SimScenario,
    TheoremReport,
    gen_synthetic,
    method_l_n,
    run_benchmark,
    time_batch,
    verify_theorems,
)

__version__ = "0.1.0"

__all__ = [
    "AssignmentDraw",
    "BalanceProblem",
    "BalanceState",
    "BenchRow",
    "ClusterStructure",
    "CovariateMatrix",
    "DesignSpec",
    "InferenceReport",
    "OutcomeData",
    "SamplerConfig",
    "SequentialStructure",
    "SequentialThresholdSpec",
    "SimScenario",
    "SimpleStructure",
    "StratifiedStructure",
    "TheoremReport",
    "ThresholdSpec",
    "apply_swap",
    "as_assignment_matrix",
    "build_problem",
    "chisq_cdf",
    "chisq_quantile",
    "ci_bounds",
    "cluster_mahalanobis",
    "contiguous_clusters",
    "contiguous_strata",
    "derive_stream_seeds",
    "diff_in_means",
    "expand_cluster_assignment",
    "frt_pvalue",
    "gen_synthetic",
    "init_state",
    "mahalanobis",
    "mahalanobis_many",
    "method_l_n",
    "noncentral_chisq_cdf",
    "noncentral_chisq_quantile",
    "randomness_metric",
    "run_benchmark",
    "sample_arsrr",
    "sample_batch",
    "sample_clust_vnsrr",
    "sample_cr",
    "sample_one",
    "sample_psrr",
    "sample_seq_vnsrr",
    "sample_strat_vnsrr",
    "sample_vnsrr",
    "sequential_mahalanobis",
    "sequential_thresholds",
    "swap_delta",
    "time_batch",
    "verify_theorems",
]
