"""Permutation test for the treatment effect by reshuffling treatment sequences across clusters."""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .covariance import CovStructure
from .datagen import substream
from .design import TrialDesign, staircase
from .errors import InvalidSpec, NonConvergence, TooFewConverged
from .lmm import CellData, FitOptions, reml_fit

__all__ = ["PermutationResult", "permutation_test", "sequence_map", "distinct_assignments"]

MAX_FAILED_FRACTION = 0.2
PERM_STREAM = 0x5045  # keeps permutation draws apart from dataset substreams


@dataclass(frozen=True)
class PermutationResult:
    observed_stat: float
    n_permutations: int
    n_failed: int
    percentile_bounds: tuple
    reject: bool
    p_value: float
    permutation_stats: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "observed_stat": self.observed_stat,
            "n_permutations": self.n_permutations,
            "n_failed": self.n_failed,
            "percentile_bounds": list(self.percentile_bounds),
            "reject": self.reject,
            "p_value": self.p_value,
        }


def sequence_map(cells: CellData) -> np.ndarray:
    """Recover each cluster's sequence from a stepped-wedge treatment grid."""
    J = cells.n_periods
    stairs = staircase(J - 1).astype(float)
    seq = (J - 1 - cells.treatment.sum(axis=1)).astype(np.intp)
    if np.any(seq < 0) or np.any(seq >= J - 1) or not np.array_equal(stairs[seq], cells.treatment):
        raise InvalidSpec("treatment grid is not a standard stepped wedge")
    return seq


def distinct_assignments(seq) -> list:
    """Every distinct rearrangement of a cluster-to-sequence map."""
    seq = np.asarray(seq)
    out = sorted(set(itertools.permutations(seq.tolist())))
    return [np.array(s, dtype=np.intp) for s in out]


def permutation_test(
    data,
    design: TrialDesign | None = None,
    working_structure="EXCH",
    n_perm: int = 1000,
    seed: int = 0,
    *,
    alpha: float = 0.05,
    threads: int = 1,
    exhaustive: bool = False,
    options: FitOptions | None = None,
) -> PermutationResult:
    """Refit under reshuffled sequence assignments and compare treatment estimates.

    The observed assignment is always part of the reference set.  The test
    rejects when the observed estimate falls strictly outside the closed
    ``[alpha/2, 1 - alpha/2]`` quantile interval of that set's empirical
    distribution.  With
    ``exhaustive`` every distinct assignment is used once and ``n_perm``
    and ``seed`` are ignored.
    """
    structure = CovStructure.parse(working_structure)
    cells = data if isinstance(data, CellData) else CellData.from_dataset(data, design)
    seq = sequence_map(cells)
    if not exhaustive and n_perm < 100:
        raise InvalidSpec(f"need at least 100 permutations, got {n_perm}")
    base = options or FitOptions(polish=False)
    observed = reml_fit(cells, structure=structure, options=base)
    if not observed.converged:
        raise NonConvergence("working model did not converge on the observed data")
    warm = replace(base, start=observed.theta)

    if exhaustive:
        perms = [p for p in distinct_assignments(seq) if not np.array_equal(p, seq)]
    else:
        perms = [substream(seed, PERM_STREAM, b).permutation(seq) for b in range(n_perm)]

    def one(p):
        fit = reml_fit(cells.with_assignment(p), structure=structure, options=warm)
        return fit.treatment_effect if fit.converged else math.nan

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            stats = list(pool.map(one, perms, chunksize=max(1, len(perms) // (4 * threads))))
    else:
        stats = [one(p) for p in perms]
    stats = np.array(stats, dtype=float)
    failed = int(np.isnan(stats).sum())
    if failed > MAX_FAILED_FRACTION * len(perms):
        raise TooFewConverged(f"{failed} of {len(perms)} permutation refits failed")
    obs = observed.treatment_effect
    ref = np.concatenate([[obs], stats[~np.isnan(stats)]])
    # empirical-distribution quantiles, so exhaustive enumeration is the exact limit of sampling
    lo, hi = np.quantile(ref, [alpha / 2, 1 - alpha / 2], method="inverted_cdf")
    reject = bool(obs < lo or obs > hi)
    p_value = float(np.mean(np.abs(ref) >= abs(obs)))
    return PermutationResult(
        observed_stat=float(obs),
        n_permutations=len(perms),
        n_failed=failed,
        percentile_bounds=(float(lo), float(hi)),
        reject=reject,
        p_value=p_value,
        permutation_stats=stats,
    )
