"""Synthetic data generation, benchmark rows, theorem diagnostics."""

import dataclasses
import json

import numpy as np
import pytest

from rerand.chisq import chisq_quantile
from rerand.core import build_problem, mahalanobis_many
from rerand.design import SimpleStructure
from rerand.errors import ConfigError
from rerand.simharness import (
    BenchRow,
    SimScenario,
    gen_synthetic,
    method_l_n,
    run_benchmark,
    time_batch,
    verify_theorems,
)


def test_gen_synthetic_effect_scaling(rng):
    x, y0, y1, tau = gen_synthetic(50, 2, rng, effect_multiplier=0.2)
    assert tau == pytest.approx(0.2 * np.sqrt(4.0))  # Var[Y(0)] = 2p = 4
    assert np.allclose(y1 - y0, tau)
    x, y0, y1, tau = gen_synthetic(50, 2, rng, effect_multiplier=0.0)
    assert tau == 0.0
    assert np.array_equal(y0, y1)


def test_gen_synthetic_outcome_variance(rng):
    # Var[Y(0)] = p (covariate sum) + p (noise) = 2p, checked at p = 50
    p = 50
    chunks = [gen_synthetic(50_000, p, rng)[1] for _ in range(20)]
    y0 = np.concatenate(chunks)
    assert y0.var() == pytest.approx(2.0 * p, rel=0.02)


def test_benchmark_smoke_single_rep():
    sc = SimScenario(
        n=20,
        p=2,
        structure={"kind": "simple", "n_treat": 10},
        methods=("cr",),
        replications=1,
        draws_per_replication=20,
        master_seed=3,
    )
    (row,) = run_benchmark(sc)
    assert row.method == "cr"
    for f in dataclasses.fields(BenchRow):
        if f.name == "method":
            continue
        assert np.isfinite(getattr(row, f.name))
    assert 0.0 <= row.size <= 1.0
    assert 0.0 <= row.coverage <= 1.0


def test_benchmark_reproducible_and_parallel_consistent():
    sc = SimScenario(
        n=24,
        p=2,
        structure={"kind": "simple", "n_treat": 12},
        effect_multiplier=0.2,
        methods=("cr", "vnsrr"),
        replications=6,
        draws_per_replication=40,
        master_seed=7,
    )
    rows1 = run_benchmark(sc, timing=False)
    rows2 = run_benchmark(sc, timing=False)
    rows_par = run_benchmark(sc, workers=2, timing=False)
    stat_fields = ("bias", "sd", "size", "power", "coverage", "length")
    for a, b in zip(rows1, rows2):
        for f in stat_fields:
            assert getattr(a, f) == getattr(b, f)
    for a, b in zip(rows1, rows_par):
        for f in stat_fields:
            assert getattr(a, f) == getattr(b, f)


def test_benchmark_inference_skip_mode():
    sc = SimScenario(
        n=20,
        p=2,
        structure={"kind": "simple", "n_treat": 10},
        methods=("vnsrr",),
        replications=4,
        draws_per_replication=10,
        master_seed=9,
        run_inference=False,
    )
    (row,) = run_benchmark(sc, timing=False)
    assert np.isfinite(row.bias) and np.isfinite(row.sd)
    assert np.isnan(row.coverage) and np.isnan(row.size)


def test_structured_scenarios_build():
    for structure in (
        {"kind": "sequential", "stage_sizes": [10, 10]},
        {"kind": "stratified", "sizes": [10, 10]},
        {"kind": "cluster", "sizes": [2] * 10},
    ):
        sc = SimScenario(
            n=20,
            p=2,
            structure=structure,
            methods=("vnsrr",),
            replications=2,
            draws_per_replication=10,
            master_seed=1,
            threshold=4.0 if structure["kind"] != "sequential" else None,
            p_a=None,
            stage_shares=(20, 20) if structure["kind"] == "sequential" else None,
        )
        rows = run_benchmark(sc, timing=False)
        assert len(rows) == 1 and np.isfinite(rows[0].sd)


def test_verify_theorems_null_bias_and_vacuous_bound():
    sc = SimScenario(
        n=30,
        p=2,
        structure={"kind": "simple", "n_treat": 15},
        methods=("cr", "vnsrr"),
        replications=2000,
        draws_per_replication=10,
        master_seed=31,
    )
    reports = verify_theorems(sc)
    for rep in reports:
        assert abs(rep.bias) <= 3.0 * rep.se
    # huge threshold: nothing rejected, reduction ~ 0, bound <= 0 (vacuous)
    sc_loose = dataclasses.replace(sc, p_a=None, threshold=1e6)
    reports = verify_theorems(sc_loose, draws=800)
    vns = [r for r in reports if r.method == "vnsrr"][0]
    assert vns.bound < 0.0
    assert abs(vns.realized_reduction) < 0.2
    assert vns.realized_reduction >= vns.bound - 3.0 * vns.sigma_mc


def test_scenario_json_round_trip():
    sc = SimScenario(
        n=40,
        p=4,
        structure={"kind": "stratified", "sizes": [20, 20]},
        effect_multiplier=0.15,
        methods=("cr", "arsrr", "vnsrr"),
        replications=12,
        draws_per_replication=34,
        master_seed=99,
        local_pairs=3,
    )
    text = sc.to_json()
    back = SimScenario.from_json(text)
    assert back == sc
    with pytest.raises(ConfigError):
        SimScenario.from_json(json.dumps({"n": 10, "p": 1, "structure": {"kind": "simple"}, "bogus": 1}))
    with pytest.raises(ConfigError):
        SimScenario.from_json(
            json.dumps({"n": 10, "p": 1, "structure": {"kind": "simple"}, "methods": ["nope"]})
        )


def test_scenario_threshold_exclusivity():
    with pytest.raises(ConfigError):
        SimScenario(
            n=10,
            p=1,
            structure={"kind": "simple"},
            p_a=1e-3,
            threshold=1.0,
        )


def test_acceptance_probability_calibration(rng):
    """The CR mass below the chi-square quantile approaches p_a as n grows."""
    p_a, p = 0.1, 2
    a = chisq_quantile(p, p_a)
    masses = {}
    for n in (30, 1000):
        x = rng.standard_normal((n, p))
        prob = build_problem(x, SimpleStructure(n, n // 2))
        hits = 0
        total = 100_000
        for start in range(0, total, 10_000):
            block = rng.random((10_000, n)).argsort(axis=1) < n // 2
            hits += int((mahalanobis_many(prob, block) <= a).sum())
        masses[n] = hits / total
    assert masses[1000] == pytest.approx(p_a, abs=0.01)
    assert abs(masses[30] - p_a) <= 0.05


def test_time_batch_and_l_n_run():
    sc = SimScenario(
        n=20,
        p=2,
        structure={"kind": "simple", "n_treat": 10},
        methods=("vnsrr",),
        replications=2,
        draws_per_replication=30,
        master_seed=17,
    )
    assert time_batch(sc, "vnsrr", count=30) > 0.0
    assert method_l_n(sc, "vnsrr", count=200) > 1.0
