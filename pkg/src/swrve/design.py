"""Balanced cross-sectional stepped-wedge layouts and fixed-effects design matrices."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IndexOutOfRange, InvalidDimension, UnbalancedDesign

__all__ = [
    "TrialDesign",
    "build_design",
    "design_matrix",
    "cell_design_matrix",
    "stacked_design_matrix",
    "staircase",
]


def staircase(n_sequences: int) -> np.ndarray:
    """Treatment rows of a standard stepped wedge, one row per sequence.

    Sequence ``s`` (0-based) is in control for periods ``0..s`` and treated
    afterwards, so every sequence starts in control and ends treated.
    """
    n_periods = n_sequences + 1
    j = np.arange(n_periods)
    s = np.arange(n_sequences)[:, None]
    return (j[None, :] > s).astype(np.int8)


@dataclass(frozen=True)
class TrialDesign:
    """Geometry of a balanced stepped-wedge trial.

    Attributes
    ----------
    n_clusters, n_sequences, n_periods, cluster_period_size
        ``I``, ``S``, ``J = S + 1`` and ``K``.
    sequence_of_cluster
        0-based sequence index for each cluster.
    treatment
        ``I x J`` binary array of treatment indicators.
    """

    n_clusters: int
    n_sequences: int
    n_periods: int
    cluster_period_size: int
    sequence_of_cluster: np.ndarray = field(repr=False)
    treatment: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.sequence_of_cluster.setflags(write=False)
        self.treatment.setflags(write=False)

    @property
    def n_params(self) -> int:
        return self.n_periods + 1

    @property
    def cluster_size(self) -> int:
        return self.n_periods * self.cluster_period_size

    @property
    def n_obs(self) -> int:
        return self.n_clusters * self.cluster_size

    @property
    def clusters_per_sequence(self) -> int:
        return self.n_clusters // self.n_sequences

    def with_assignment(self, sequence_of_cluster) -> "TrialDesign":
        """Same geometry with clusters reassigned to sequences."""
        seq = np.asarray(sequence_of_cluster, dtype=np.intp).copy()
        counts = np.bincount(seq, minlength=self.n_sequences)
        if seq.shape != (self.n_clusters,) or np.any(counts != self.clusters_per_sequence):
            raise UnbalancedDesign("assignment must place I/S clusters in every sequence")
        return TrialDesign(
            self.n_clusters,
            self.n_sequences,
            self.n_periods,
            self.cluster_period_size,
            seq,
            staircase(self.n_sequences)[seq],
        )


def build_design(n_clusters: int, n_sequences: int, cluster_period_size: int) -> TrialDesign:
    """Balanced stepped wedge with clusters assigned to sequences in index order."""
    if n_clusters < 2 or n_sequences < 1 or cluster_period_size < 1:
        raise InvalidDimension(
            f"need I >= 2, S >= 1, K >= 1; got I={n_clusters}, S={n_sequences}, K={cluster_period_size}"
        )
    if n_clusters % n_sequences:
        raise UnbalancedDesign(f"I={n_clusters} is not a multiple of S={n_sequences}")
    per = n_clusters // n_sequences
    seq = np.repeat(np.arange(n_sequences, dtype=np.intp), per)
    return TrialDesign(
        int(n_clusters),
        int(n_sequences),
        int(n_sequences) + 1,
        int(cluster_period_size),
        seq,
        staircase(n_sequences)[seq],
    )


def cell_design_matrix(treatment_row) -> np.ndarray:
    """One design row per period: intercept, period dummies (period 1 as reference), treatment."""
    t = np.asarray(treatment_row, dtype=float)
    n_periods = t.shape[0]
    X = np.zeros((n_periods, n_periods + 1))
    X[:, 0] = 1.0
    X[1:, 1:n_periods] = np.eye(n_periods - 1)
    X[:, n_periods] = t
    return X


def design_matrix(design: TrialDesign, cluster: int) -> np.ndarray:
    """``n_i x P`` fixed-effects matrix for one cluster, rows ordered period-major."""
    if not 0 <= cluster < design.n_clusters:
        raise IndexOutOfRange(f"cluster {cluster} outside 0..{design.n_clusters - 1}")
    cells = cell_design_matrix(design.treatment[cluster])
    return np.repeat(cells, design.cluster_period_size, axis=0)


def stacked_design_matrix(design: TrialDesign) -> np.ndarray:
    return np.vstack([design_matrix(design, i) for i in range(design.n_clusters)])
