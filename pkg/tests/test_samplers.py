"""Sampler distribution and trajectory contracts on enumerable instances."""

import numpy as np
import pytest
import scipy.stats as ss

from rerand.chisq import SequentialThresholdSpec, chisq_quantile
from rerand.core import (
    build_problem,
    cluster_mahalanobis,
    mahalanobis,
    mahalanobis_many,
    sequential_mahalanobis,
)
from rerand.design import (
    SequentialStructure,
    SimpleStructure,
    contiguous_clusters,
    contiguous_strata,
)
from rerand.errors import ConfigInvalid, IterationBudgetExceeded
from rerand.samplers import (
    AssignmentDraw,
    SamplerConfig,
    default_local_pairs,
    default_shake_pairs,
    derive_stream_seeds,
    sample_arsrr,
    sample_batch,
    sample_clust_vnsrr,
    sample_cr,
    sample_one,
    sample_psrr,
    sample_psrr_traced,
    sample_seq_vnsrr,
    sample_strat_vnsrr,
    sample_vnsrr,
    sample_vnsrr_traced,
)
from rerand._kernels import TRACE_INIT, TRACE_LOCAL, TRACE_SHAKE

from conftest import (
    assert_mirror_symmetric,
    assignment_counts,
    enumerate_simple,
    mirror_pairs,
    safe_threshold,
)

INF = float("inf")


@pytest.fixture(scope="module")
def n8_instance():
    rng = np.random.default_rng(88)
    x = rng.standard_normal((8, 2))
    problem = build_problem(x, SimpleStructure(8, 4))
    universe = enumerate_simple(8, 4)
    ms = mahalanobis_many(problem, universe)
    return problem, universe, ms


# -- complete randomization --------------------------------------------------


def test_cr_two_units(rng):
    x = np.array([[1.0], [-1.0]])
    prob = build_problem(x, SimpleStructure(2, 1))
    hits = sum(int(sample_cr(prob, rng).assignment[0]) for _ in range(10_000))
    assert abs(hits - 5000) < 4 * np.sqrt(10_000 * 0.25)


def test_cr_uniform_over_subsets(rng):
    x = np.random.default_rng(5).standard_normal((4, 1))
    prob = build_problem(x, SimpleStructure(4, 2))
    universe = enumerate_simple(4, 2)
    n_draws = 60_000
    draws = [sample_cr(prob, rng) for _ in range(n_draws)]
    counts = assignment_counts(draws, universe)
    expected = n_draws / 6
    for c in counts:
        assert abs(c - expected) < 3 * np.sqrt(expected * (1 - 1 / 6))
    assert all(d.iterations == 1 for d in draws[:10])


def test_cr_cluster_uniform(rng):
    x = np.random.default_rng(6).standard_normal((8, 1))
    prob = build_problem(x, contiguous_clusters([2] * 4, 2))
    counts = {}
    n_draws = 30_000
    for _ in range(n_draws):
        u = tuple(sample_cr(prob, rng).cluster_indicator)
        counts[u] = counts.get(u, 0) + 1
    assert len(counts) == 6
    expected = n_draws / 6
    for c in counts.values():
        assert abs(c - expected) < 4 * np.sqrt(expected)


# -- acceptance-rejection ----------------------------------------------------


def test_arsrr_infinite_threshold_is_one_cr_draw(rng):
    x = np.random.default_rng(1).standard_normal((10, 2))
    prob = build_problem(x, SimpleStructure(10, 5))
    d = sample_arsrr(prob, INF, SamplerConfig(method="arsrr"), rng)
    assert d.iterations == 1


def test_arsrr_uniform_on_accepted_set(rng, n8_instance):
    problem, universe, ms = n8_instance
    a = safe_threshold(ms, 0.5)
    accepted = universe[ms <= a]
    n_draws = 20_000
    cfg = SamplerConfig(method="arsrr")
    draws = [sample_arsrr(problem, a, cfg, rng) for _ in range(n_draws)]
    counts = assignment_counts(draws, accepted)
    assert counts.sum() == n_draws  # support inside the accepted set
    stat = ((counts - n_draws / len(accepted)) ** 2 / (n_draws / len(accepted))).sum()
    p = ss.chi2.sf(stat, len(accepted) - 1)
    assert p > 0.01


def test_arsrr_budget_exceeded_below_min(n8_instance, rng):
    problem, universe, ms = n8_instance
    cfg = SamplerConfig(method="arsrr", max_iterations=2000)
    with pytest.raises(IterationBudgetExceeded):
        sample_arsrr(problem, float(ms.min()) * 0.5, cfg, rng)


def test_arsrr_mean_iterations_tracks_acceptance_mass(rng):
    x = np.random.default_rng(3).standard_normal((100, 2))
    prob = build_problem(x, SimpleStructure(100, 50))
    a = chisq_quantile(2, 1e-2)
    # empirical acceptance mass from a large CR sample
    mass_draws = np.zeros((200_000, 100), dtype=np.int8)
    for start in range(0, 200_000, 20_000):
        block = rng.random((20_000, 100)).argsort(axis=1) < 50
        mass_draws[start : start + 20_000] = block
    p_hat = float((mahalanobis_many(prob, mass_draws) <= a).mean())
    cfg = SamplerConfig(method="arsrr")
    iters = [sample_arsrr(prob, a, cfg, rng).iterations for _ in range(400)]
    assert np.mean(iters) == pytest.approx(1.0 / p_hat, rel=0.2)


# -- pair switching ----------------------------------------------------------


def test_psrr_infinite_threshold_returns_initial(rng):
    x = np.random.default_rng(1).standard_normal((10, 2))
    prob = build_problem(x, SimpleStructure(10, 5))
    d = sample_psrr(prob, INF, SamplerConfig(method="psrr"), rng)
    assert d.iterations == 0


def test_psrr_huge_gamma_is_greedy(n8_instance):
    problem, universe, ms = n8_instance
    a = safe_threshold(ms, 0.2)
    cfg = SamplerConfig(method="psrr", gamma=1e9)
    for seed in range(20):
        draw, trace, kinds = sample_psrr_traced(problem, a, cfg, seed)
        # every accepted move strictly improves: no uphill at zero temperature
        assert np.all(np.diff(trace) < 0)


def test_psrr_support_and_mirror(n8_instance, rng):
    problem, universe, ms = n8_instance
    a = safe_threshold(ms, 0.2)
    accepted = universe[ms <= a]
    cfg = SamplerConfig(method="psrr")
    draws = sample_batch(problem, a, cfg, 20_000, master_seed=404)
    counts = assignment_counts(draws, accepted)
    assert counts.sum() == len(draws)
    assert_mirror_symmetric(counts, accepted)


def test_psrr_rejects_structured_designs(rng):
    x = np.random.default_rng(2).standard_normal((8, 1))
    strat = build_problem(x, contiguous_strata([4, 4], [2, 2]))
    with pytest.raises(ConfigInvalid):
        sample_psrr(strat, 1.0, SamplerConfig(method="psrr"), rng)
    clust = build_problem(x, contiguous_clusters([2] * 4, 2))
    with pytest.raises(ConfigInvalid):
        sample_psrr(clust, 1.0, SamplerConfig(method="psrr"), rng)


# -- local search ------------------------------------------------------------


def test_vnsrr_infinite_threshold_zero_evaluations(rng):
    x = np.random.default_rng(1).standard_normal((10, 2))
    prob = build_problem(x, SimpleStructure(10, 5))
    d = sample_vnsrr(prob, INF, SamplerConfig(), rng)
    assert d.iterations == 0
    assert d.assignment.sum() == 5


def test_vnsrr_four_unit_support(rng):
    x = np.array([[1.0], [1.0], [-1.0], [-1.0]])
    prob = build_problem(x, SimpleStructure(4, 2))
    zero_m = {(1, 0, 1, 0), (0, 1, 1, 0), (1, 0, 0, 1), (0, 1, 0, 1)}
    cfg = SamplerConfig(local_pairs=1, shake_pairs=1)
    for d in sample_batch(prob, 0.5, cfg, 300, master_seed=5):
        assert tuple(d.assignment) in zero_m
        assert d.m_value <= 0.5


def test_vnsrr_support_and_mirror(n8_instance):
    problem, universe, ms = n8_instance
    a = safe_threshold(ms, 0.2)
    accepted = universe[ms <= a]
    draws = sample_batch(problem, a, SamplerConfig(), 20_000, master_seed=99)
    counts = assignment_counts(draws, accepted)
    assert counts.sum() == len(draws)
    assert_mirror_symmetric(counts, accepted)


def test_vnsrr_descent_within_local_phase(n8_instance):
    problem, universe, ms = n8_instance
    a = safe_threshold(ms, 0.1)
    cfg = SamplerConfig(local_pairs=3, shake_pairs=2)
    for seed in range(25):
        draw, trace, kinds = sample_vnsrr_traced(problem, a, cfg, seed)
        assert kinds[0] == TRACE_INIT
        for t in range(1, len(trace)):
            if kinds[t] == TRACE_LOCAL:
                assert trace[t] < trace[t - 1]  # applied swaps strictly improve
        assert draw.m_value <= a


def test_vnsrr_budget_error(n8_instance, rng):
    problem, universe, ms = n8_instance
    cfg = SamplerConfig(max_iterations=500)
    with pytest.raises(IterationBudgetExceeded):
        sample_vnsrr(problem, float(ms.min()) * 0.5, cfg, rng)


def test_vnsrr_config_validation(rng):
    x = np.random.default_rng(1).standard_normal((10, 2))
    prob = build_problem(x, SimpleStructure(10, 5))
    with pytest.raises(ConfigInvalid):
        sample_vnsrr(prob, 1.0, SamplerConfig(local_pairs=6), rng)
    with pytest.raises(ConfigInvalid):
        sample_vnsrr(prob, 1.0, SamplerConfig(shake_pairs=9), rng)
    with pytest.raises(ConfigInvalid):
        SamplerConfig(method="annealing")
    with pytest.raises(ConfigInvalid):
        SamplerConfig(gamma=0.0)
    assert default_local_pairs(50, 50) == 10
    assert default_local_pairs(6, 6) == 1
    assert default_shake_pairs(10) == 5


# -- sequential --------------------------------------------------------------


def test_seq_single_stage_matches_simple_support(rng):
    x = np.random.default_rng(9).standard_normal((8, 2))
    seq = build_problem(x, SequentialStructure((8,), (4,)))
    simple = build_problem(x, SimpleStructure(8, 4))
    universe = enumerate_simple(8, 4)
    ms = mahalanobis_many(simple, universe)
    a = safe_threshold(ms, 0.3)
    accepted = universe[ms <= a]
    draws = sample_batch(seq, (a,), SamplerConfig(), 5000, master_seed=10)
    counts = assignment_counts(draws, accepted)
    assert counts.sum() == len(draws)
    assert_mirror_symmetric(counts, accepted)


def test_seq_stage1_infinite_is_cr(rng):
    x = np.random.default_rng(9).standard_normal((12, 2))
    prob = build_problem(x, SequentialStructure((6, 6), (3, 3)))
    draws = sample_batch(prob, (INF, 2.0), SamplerConfig(), 2000, master_seed=3)
    # stage-1 block is unconstrained; stage-2 objective meets its threshold
    for d in draws[:50]:
        assert d.stage_m_values[1] <= 2.0
        assert d.assignment[:6].sum() == 3 and d.assignment[6:].sum() == 3
    # stage-1 marginals uniform: each unit treated about half the time
    mat = np.array([d.assignment for d in draws])
    freq = mat[:, :6].mean(axis=0)
    assert np.abs(freq - 0.5).max() < 4 * np.sqrt(0.25 / len(draws))


def test_seq_two_stage_constraints_and_thresholds(rng):
    x = np.random.default_rng(11).standard_normal((8, 1))
    prob = build_problem(x, SequentialStructure((4, 4), (2, 2)))
    a = (2.0, 1.5)
    for d in sample_batch(prob, a, SamplerConfig(), 500, master_seed=21):
        assert d.assignment[:4].sum() == 2 and d.assignment[4:].sum() == 2
        assert d.stage_m_values[0] <= 2.0
        assert d.stage_m_values[1] <= 1.5
        assert sequential_mahalanobis(prob, d.assignment) == pytest.approx(
            d.stage_m_values[1], rel=1e-9
        )


def test_seq_schedule_spec_drives_thresholds(rng):
    x = np.random.default_rng(12).standard_normal((40, 2))
    prob = build_problem(x, SequentialStructure((20, 20), (10, 10)))
    spec = SequentialThresholdSpec((50, 50), 2, (20, 20))
    d = sample_seq_vnsrr(prob, spec, SamplerConfig(), rng)
    a1 = spec.stage_threshold(1, 0.0)
    a2 = spec.stage_threshold(2, d.stage_m_values[0])
    assert d.stage_m_values[0] <= a1
    assert d.stage_m_values[1] <= a2


def test_seq_budget_error_reports_stage(rng):
    x = np.random.default_rng(11).standard_normal((8, 1))
    prob = build_problem(x, SequentialStructure((4, 4), (2, 2)))
    with pytest.raises(IterationBudgetExceeded) as exc:
        sample_seq_vnsrr(prob, (1e-12, 1e-12), SamplerConfig(max_iterations=300), rng)
    assert exc.value.stage == 1


# -- stratified --------------------------------------------------------------


def test_strat_single_stratum_matches_simple(n8_instance):
    problem, universe, ms = n8_instance
    x = problem.covariates.values
    strat = build_problem(x, contiguous_strata([8], [4]))
    a = safe_threshold(ms, 0.25)
    accepted = universe[ms <= a]
    draws = sample_batch(strat, a, SamplerConfig(), 20_000, master_seed=31)
    counts = assignment_counts(draws, accepted)
    assert counts.sum() == len(draws)
    assert_mirror_symmetric(counts, accepted)


def test_strat_two_strata_counts_preserved(rng):
    x = np.concatenate([[[1.0]], [[1.0]], [[-1.0]], [[-1.0]]] * 2)
    x = x + 0.01 * np.random.default_rng(0).standard_normal((8, 1))
    prob = build_problem(x, contiguous_strata([4, 4], [1, 1]))
    ms_all = []
    for d in sample_batch(prob, 0.8, SamplerConfig(local_pairs=1, shake_pairs=1), 500, master_seed=8):
        assert d.assignment[:4].sum() == 1 and d.assignment[4:].sum() == 1
        assert d.m_value <= 0.8
        ms_all.append(d.m_value)
    assert min(ms_all) >= 0.0


def test_strat_infinite_threshold_is_stratified_cr(rng):
    x = np.random.default_rng(14).standard_normal((8, 1))
    prob = build_problem(x, contiguous_strata([4, 4], [2, 2]))
    draws = sample_batch(prob, INF, SamplerConfig(), 20_000, master_seed=15)
    # uniform over the 36-point product space
    counts = {}
    for d in draws:
        counts[tuple(d.assignment)] = counts.get(tuple(d.assignment), 0) + 1
    assert len(counts) == 36
    expected = len(draws) / 36
    stat = sum((c - expected) ** 2 / expected for c in counts.values())
    assert ss.chi2.sf(stat, 35) > 0.01


# -- cluster -----------------------------------------------------------------


def test_clust_singletons_match_simple(n8_instance):
    problem, universe, ms = n8_instance
    x = problem.covariates.values
    clust = build_problem(x, contiguous_clusters([1] * 8, 4))
    a = safe_threshold(ms, 0.25)
    accepted = universe[ms <= a]
    draws = sample_batch(clust, a, SamplerConfig(), 20_000, master_seed=41)
    counts = assignment_counts(draws, accepted)
    assert counts.sum() == len(draws)
    assert_mirror_symmetric(counts, accepted)


def test_clust_enumerable_support(rng):
    x = np.random.default_rng(17).standard_normal((8, 1))
    prob = build_problem(x, contiguous_clusters([2] * 4, 2))
    universe_u = enumerate_simple(4, 2)
    ms = np.array([cluster_mahalanobis(prob, u) for u in universe_u])
    a = safe_threshold(ms, 0.5)
    accepted = {tuple(u) for u, m in zip(universe_u, ms) if m <= a}
    for d in sample_batch(prob, a, SamplerConfig(local_pairs=1, shake_pairs=1), 2000, master_seed=42):
        assert tuple(d.cluster_indicator) in accepted


def test_clust_infinite_threshold_uniform(rng):
    x = np.random.default_rng(18).standard_normal((8, 1))
    prob = build_problem(x, contiguous_clusters([2] * 4, 2))
    counts = {}
    for d in sample_batch(prob, INF, SamplerConfig(), 30_000, master_seed=43):
        key = tuple(d.cluster_indicator)
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == 6
    expected = 30_000 / 6
    stat = sum((c - expected) ** 2 / expected for c in counts.values())
    assert ss.chi2.sf(stat, 5) > 0.01


# -- batching ----------------------------------------------------------------


def test_batch_bitwise_determinism(n8_instance):
    problem, universe, ms = n8_instance
    a = safe_threshold(ms, 0.5)
    for method in ("cr", "arsrr", "psrr", "vnsrr"):
        cfg = SamplerConfig(method=method)
        b1 = sample_batch(problem, a, cfg, 10, master_seed=123)
        b2 = sample_batch(problem, a, cfg, 10, master_seed=123)
        for d1, d2 in zip(b1, b2):
            assert np.array_equal(d1.assignment, d2.assignment)
            assert d1.m_value == d2.m_value
            assert d1.iterations == d2.iterations


def test_batch_postcondition_all_below_threshold():
    rng = np.random.default_rng(77)
    x = rng.standard_normal((100, 2))
    prob = build_problem(x, SimpleStructure(100, 50))
    a = chisq_quantile(2, 1e-3)
    draws = sample_batch(prob, a, SamplerConfig(), 1000, master_seed=7)
    assert len(draws) == 1000
    for d in draws:
        assert d.m_value <= a
    fresh = mahalanobis_many(prob, np.array([d.assignment for d in draws]))
    assert np.all(fresh <= a * (1 + 1e-9))


def test_batch_parallel_matches_serial(n8_instance):
    problem, universe, ms = n8_instance
    a = safe_threshold(ms, 0.5)
    for method in ("vnsrr", "arsrr"):
        cfg = SamplerConfig(method=method)
        serial = sample_batch(problem, a, cfg, 12, master_seed=55, workers=1)
        parallel = sample_batch(problem, a, cfg, 12, master_seed=55, workers=2)
        for d1, d2 in zip(serial, parallel):
            assert np.array_equal(d1.assignment, d2.assignment)
            assert d1.m_value == d2.m_value


def test_batch_budget_error_carries_draw_index(n8_instance):
    problem, universe, ms = n8_instance
    cfg = SamplerConfig(max_iterations=300)
    with pytest.raises(IterationBudgetExceeded) as exc:
        sample_batch(problem, float(ms.min()) * 0.5, cfg, 5, master_seed=1)
    assert exc.value.draw_index is not None


def test_stream_seed_derivation_is_order_independent():
    a = derive_stream_seeds(99, 0, 10)
    b = derive_stream_seeds(99, 5, 5)
    assert np.array_equal(a[5:], b)
    assert len(set(int(s) for s in a)) == 10


# -- updating rule depends on M only (sign-flip stability) --------------------


def test_sign_flip_leaves_m_trajectories_identical(n8_instance):
    problem, universe, ms = n8_instance
    x = problem.covariates.values.copy()
    x_flip = x.copy()
    x_flip[:, 1] *= -1.0
    flipped = build_problem(x_flip, SimpleStructure(8, 4))
    a = safe_threshold(ms, 0.2)
    cfg = SamplerConfig(local_pairs=2, shake_pairs=1)
    for seed in range(30):
        d1, t1, k1 = sample_vnsrr_traced(problem, a, cfg, seed)
        d2, t2, k2 = sample_vnsrr_traced(flipped, a, cfg, seed)
        assert np.array_equal(t1, t2) and np.array_equal(k1, k2)
        assert np.array_equal(d1.assignment, d2.assignment)
        p1, p2 = sample_psrr_traced(problem, a, cfg, seed), sample_psrr_traced(
            flipped, a, cfg, seed
        )
        assert np.array_equal(p1[1], p2[1])
        assert np.array_equal(p1[0].assignment, p2[0].assignment)


def test_sign_flip_structured_final_states(rng):
    x = np.random.default_rng(23).standard_normal((16, 2))
    x_flip = x.copy()
    x_flip[:, 0] *= -1.0
    for make in (
        lambda d: build_problem(d, contiguous_strata([8, 8], [4, 4])),
        lambda d: build_problem(d, contiguous_clusters([2] * 8, 4)),
        lambda d: build_problem(d, SequentialStructure((8, 8), (4, 4))),
    ):
        p1, p2 = make(x), make(x_flip)
        a = 2.0 if not isinstance(p1.structure, SequentialStructure) else (2.0, 2.0)
        b1 = sample_batch(p1, a, SamplerConfig(), 50, master_seed=77)
        b2 = sample_batch(p2, a, SamplerConfig(), 50, master_seed=77)
        for d1, d2 in zip(b1, b2):
            assert np.array_equal(d1.assignment, d2.assignment)
            assert d1.m_value == d2.m_value


# -- dispatch ----------------------------------------------------------------


def test_sample_one_routes_by_structure(rng):
    x = np.random.default_rng(31).standard_normal((16, 2))
    configs = SamplerConfig()
    structures = [
        SimpleStructure(16, 8),
        SequentialStructure((8, 8), (4, 4)),
        contiguous_strata([8, 8], [4, 4]),
        contiguous_clusters([2] * 8, 4),
    ]
    for st in structures:
        prob = build_problem(x, st)
        a = (3.0, 3.0) if isinstance(st, SequentialStructure) else 3.0
        d = sample_one(prob, a, configs, rng)
        prob.check_feasible(d.assignment)
        assert d.m_value <= 3.0
