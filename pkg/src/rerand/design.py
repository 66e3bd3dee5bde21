"""Experiment structures and the user-facing design description.

A structure pins down the feasible set of 0/1 assignment vectors:
which units exist, how many go to treatment, and whether constraints
act globally (simple), per stage (sequential), per stratum, or at the
cluster level.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DimensionMismatch


@dataclass(frozen=True)
class SimpleStructure:
    """Fixed treated count n_t out of n units."""

    n: int
    n_treat: int

    def __post_init__(self):
        if not 0 < self.n_treat < self.n:
            raise DimensionMismatch(
                f"n_treat must lie strictly between 0 and n, got {self.n_treat}/{self.n}"
            )

    @property
    def n_control(self) -> int:
        return self.n - self.n_treat


@dataclass(frozen=True)
class SequentialStructure:
    """Units arrive in K consecutive stages; stage k assigns its own block.

    Stage boundaries are cumulative sums of ``stage_sizes``; ``stage_treated[k]``
    units of stage k go to treatment. Assignments of earlier stages are frozen
    when stage k is drawn.
    """

    stage_sizes: tuple[int, ...]
    stage_treated: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "stage_sizes", tuple(int(s) for s in self.stage_sizes))
        object.__setattr__(self, "stage_treated", tuple(int(s) for s in self.stage_treated))
        if len(self.stage_sizes) != len(self.stage_treated):
            raise DimensionMismatch("stage_sizes and stage_treated lengths differ")
        if len(self.stage_sizes) == 0:
            raise DimensionMismatch("at least one stage is required")
        for nk, ntk in zip(self.stage_sizes, self.stage_treated):
            if not 0 < ntk < nk:
                raise DimensionMismatch(
                    f"per-stage treated count must lie in (0, n_k), got {ntk}/{nk}"
                )

    @property
    def n(self) -> int:
        return sum(self.stage_sizes)

    @property
    def n_treat(self) -> int:
        return sum(self.stage_treated)

    @property
    def n_stages(self) -> int:
        return len(self.stage_sizes)

    def boundaries(self) -> np.ndarray:
        """Cumulative stage boundaries, length K+1, starting at 0."""
        return np.concatenate([[0], np.cumsum(self.stage_sizes)])


@dataclass(frozen=True)
class StratifiedStructure:
    """Fixed treated count within each stratum; balance measured globally."""

    strata: tuple[tuple[int, ...], ...]
    stratum_treated: tuple[int, ...]

    def __post_init__(self):
        strata = tuple(tuple(int(i) for i in s) for s in self.strata)
        object.__setattr__(self, "strata", strata)
        object.__setattr__(
            self, "stratum_treated", tuple(int(t) for t in self.stratum_treated)
        )
        if len(strata) != len(self.stratum_treated):
            raise DimensionMismatch("strata and stratum_treated lengths differ")
        seen = set()
        for s in strata:
            seen.update(s)
        n = sum(len(s) for s in strata)
        if len(seen) != n or seen != set(range(n)):
            raise DimensionMismatch("stratum index sets must partition 0..n-1")
        for s, t in zip(strata, self.stratum_treated):
            if not 0 <= t <= len(s):
                raise DimensionMismatch(f"stratum treated count {t} out of range")

    @property
    def n(self) -> int:
        return sum(len(s) for s in self.strata)

    @property
    def n_treat(self) -> int:
        return sum(self.stratum_treated)

    @property
    def n_strata(self) -> int:
        return len(self.strata)


@dataclass(frozen=True)
class ClusterStructure:
    """Treatment assigned to whole clusters; K_t clusters become treated."""

    clusters: tuple[tuple[int, ...], ...]
    n_treat_clusters: int

    def __post_init__(self):
        clusters = tuple(tuple(int(i) for i in c) for c in self.clusters)
        object.__setattr__(self, "clusters", clusters)
        seen = set()
        for c in clusters:
            if len(c) == 0:
                raise DimensionMismatch("empty cluster")
            seen.update(c)
        n = sum(len(c) for c in clusters)
        if len(seen) != n or seen != set(range(n)):
            raise DimensionMismatch("cluster index sets must partition 0..n-1")
        if not 0 < self.n_treat_clusters < len(clusters):
            raise DimensionMismatch(
                f"treated cluster count must lie in (0, K), got "
                f"{self.n_treat_clusters}/{len(clusters)}"
            )

    @property
    def n(self) -> int:
        return sum(len(c) for c in self.clusters)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.clusters], dtype=np.int64)

    @property
    def n_treat(self) -> int:
        """Treated unit count; nominal when cluster sizes are unequal.

        With unequal sizes no fixed count exists (it depends on which clusters
        are drawn); objective evaluations always use the realized count, this
        value only parameterizes the reference quadratic-form scaling.
        """
        return int(round(self.n * self.n_treat_clusters / self.n_clusters))


Structure = Union[SimpleStructure, SequentialStructure, StratifiedStructure, ClusterStructure]


def contiguous_strata(sizes: Sequence[int], treated: Sequence[int]) -> StratifiedStructure:
    """Strata of consecutive unit indices with the given sizes."""
    bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    strata = tuple(tuple(range(bounds[k], bounds[k + 1])) for k in range(len(sizes)))
    return StratifiedStructure(strata, tuple(treated))


def contiguous_clusters(sizes: Sequence[int], n_treat_clusters: int) -> ClusterStructure:
    """Clusters of consecutive unit indices with the given sizes."""
    bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    clusters = tuple(tuple(range(bounds[k], bounds[k + 1])) for k in range(len(sizes)))
    return ClusterStructure(clusters, n_treat_clusters)


@dataclass
class DesignSpec:
    """User-facing experiment description.

    Exactly one of ``p_a`` / ``threshold`` / ``stage_thresholds`` /
    ``stage_shares`` defines the acceptance rule; samplers translate it into
    explicit thresholds. Sampler hyperparameters left as ``None`` fall back to
    instance-size defaults.
    """

    structure: Structure
    p_a: Optional[float] = None
    threshold: Optional[float] = None
    stage_thresholds: Optional[tuple[float, ...]] = None
    stage_shares: Optional[tuple[int, ...]] = None
    local_pairs: Optional[int] = None
    shake_pairs: Optional[int] = None
    gamma: float = 20.0
    max_iterations: int = 10_000_000
    seed: Optional[int] = None

    def __post_init__(self):
        given = [
            name
            for name, v in [
                ("p_a", self.p_a),
                ("threshold", self.threshold),
                ("stage_thresholds", self.stage_thresholds),
                ("stage_shares", self.stage_shares),
            ]
            if v is not None
        ]
        if len(given) > 1:
            raise ConfigError(f"acceptance rule over-specified: {', '.join(given)}")
        if self.p_a is not None and not 0.0 < self.p_a < 1.0:
            raise ConfigError("p_a must lie in (0, 1)")
        if self.threshold is not None and self.threshold <= 0.0:
            raise ConfigError("threshold must be positive")
